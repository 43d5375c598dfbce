//! Forward pass with block capture and the matching reverse-mode pass.

use std::ops::Range;

use rand::Rng;

use super::config::{UNetConfig, NUM_BLOCKS};
use super::layers::*;
use super::params::{BlockSlots, ConvSlot, LinearSlot, ModelParams, NormSlot};
use crate::diffusion::{mse, LossDraws, NoiseModel, NoiseSchedule, SignalBatch};
use crate::error::{Error, Result};
use crate::real::Real;

/// Outputs of blocks b1..b8, each `[C_i][B][L_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockActivations<F> {
    pub blocks: Vec<Act<F>>,
}

impl<F: Real> BlockActivations<F> {
    /// Temporal means per block, each laid out `[B][C_i]`.
    pub fn pooled(&self) -> Vec<Vec<F>> {
        self.blocks.iter().map(Act::mean_pool).collect()
    }
}

struct BlockTape<F> {
    c1: ConvCache<F>,
    n1c: NormCache<F>,
    n1: Act<F>,
    film: Vec<F>,
    f: Act<F>,
    c2: ConvCache<F>,
    n2c: NormCache<F>,
    n2: Act<F>,
    skip: Option<ConvCache<F>>,
}

struct Tape<F> {
    in_proj: ConvCache<F>,
    emb: Vec<F>,
    t1_pre: Vec<F>,
    t1: Vec<F>,
    t2_pre: Vec<F>,
    temb: Vec<F>,
    blocks: Vec<BlockTape<F>>,
    downs: Vec<ConvCache<F>>,
    mid_down: ConvCache<F>,
    mid_pre: Vec<F>,
    mid_up: ConvCache<F>,
    ups: Vec<ConvCache<F>>,
    out_proj: ConvCache<F>,
}

fn pair_mut<'a, F>(buf: &'a mut [F], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [F], &'a mut [F]) {
    assert!(a.end <= b.start, "parameter ranges out of order");
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

fn to_act<F: Real>(x: &SignalBatch<F>) -> Act<F> {
    let mut a = Act::zeros(2, x.batch, x.len);
    for b in 0..x.batch {
        let s = x.sample(b);
        a.row_mut(0, b).copy_from_slice(&s[..x.len]);
        a.row_mut(1, b).copy_from_slice(&s[x.len..]);
    }
    a
}

fn from_act<F: Real>(a: &Act<F>) -> Vec<F> {
    let mut out = Vec::with_capacity(a.data.len());
    for b in 0..a.b {
        for c in 0..a.c {
            out.extend_from_slice(a.row(c, b));
        }
    }
    out
}

fn with_data<F>(shape: &Act<F>, data: Vec<F>) -> Act<F> {
    Act {
        c: shape.c,
        b: shape.b,
        l: shape.l,
        data,
    }
}

impl<F: Real> ModelParams<F> {
    fn p(&self, r: &Range<usize>) -> &[F] {
        &self.data()[r.clone()]
    }

    fn conv(&self, s: &ConvSlot, x: &Act<F>) -> (Act<F>, ConvCache<F>) {
        conv_forward(x, self.p(&s.w), self.p(&s.b), &s.geom)
    }

    fn conv_back(&self, s: &ConvSlot, dy: &Act<F>, cache: &ConvCache<F>, grads: &mut [F], need_dx: bool) -> Option<Act<F>> {
        let (dw, db) = pair_mut(grads, &s.w, &s.b);
        conv_backward(dy, cache, self.p(&s.w), &s.geom, dw, db, need_dx)
    }

    fn norm(&self, s: &NormSlot, x: &Act<F>) -> (Act<F>, NormCache<F>) {
        group_norm_forward(x, self.p(&s.gamma), self.p(&s.beta), self.config().norm_groups)
    }

    fn norm_back(&self, s: &NormSlot, dy: &Act<F>, cache: &NormCache<F>, grads: &mut [F]) -> Act<F> {
        let (dg, db) = pair_mut(grads, &s.gamma, &s.beta);
        group_norm_backward(dy, cache, self.p(&s.gamma), self.config().norm_groups, dg, db)
    }

    fn linear(&self, s: &LinearSlot, x: &[F], batch: usize) -> Vec<F> {
        linear_forward(x, self.p(&s.w), self.p(&s.b), batch, s.din, s.dout)
    }

    fn linear_back(&self, s: &LinearSlot, dy: &[F], x: &[F], batch: usize, grads: &mut [F]) -> Vec<F> {
        let (dw, db) = pair_mut(grads, &s.w, &s.b);
        linear_backward(dy, x, self.p(&s.w), batch, s.din, s.dout, dw, db)
    }

    fn block_forward(&self, s: &BlockSlots, x: &Act<F>, film: Vec<F>) -> (Act<F>, BlockTape<F>) {
        let (c1, c1c) = self.conv(&s.conv1, x);
        let (n1, n1c) = self.norm(&s.norm1, &c1);
        let f = film_forward(&n1, &film);
        let a1 = with_data(&f, silu_slice(&f.data));
        let (c2, c2c) = self.conv(&s.conv2, &a1);
        let (n2, n2c) = self.norm(&s.norm2, &c2);
        let mut out = with_data(&n2, silu_slice(&n2.data));
        let skip = match &s.skip {
            Some(sk) => {
                let (y, cache) = self.conv(sk, x);
                out.add_assign(&y);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        let tape = BlockTape {
            c1: c1c,
            n1c,
            n1,
            film,
            f,
            c2: c2c,
            n2c,
            n2,
            skip,
        };
        (out, tape)
    }

    /// Returns `(dx, dfilm)`.
    fn block_backward(&self, s: &BlockSlots, dout: &Act<F>, tape: &BlockTape<F>, grads: &mut [F]) -> (Act<F>, Vec<F>) {
        let mut dn2 = dout.clone();
        silu_backward_inplace(&mut dn2.data, &tape.n2.data);
        let dc2 = self.norm_back(&s.norm2, &dn2, &tape.n2c, grads);
        let mut df = self
            .conv_back(&s.conv2, &dc2, &tape.c2, grads, true)
            .expect("input gradient requested");
        silu_backward_inplace(&mut df.data, &tape.f.data);
        let (dn1, dfilm) = film_backward(&df, &tape.n1, &tape.film);
        let dc1 = self.norm_back(&s.norm1, &dn1, &tape.n1c, grads);
        let mut dx = self
            .conv_back(&s.conv1, &dc1, &tape.c1, grads, true)
            .expect("input gradient requested");
        match (&s.skip, &tape.skip) {
            (Some(sk), Some(cache)) => {
                let d = self.conv_back(sk, dout, cache, grads, true).expect("input gradient requested");
                dx.add_assign(&d);
            }
            _ => dx.add_assign(dout),
        }
        (dx, dfilm)
    }

    fn check_input(&self, x: &SignalBatch<F>, steps: &[usize]) -> Result<()> {
        UNetConfig::check_length(x.len)?;
        if x.batch == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if steps.len() != x.batch {
            return Err(Error::shape(format!(
                "{} steps for a batch of {}",
                steps.len(),
                x.batch
            )));
        }
        if steps.contains(&0) {
            return Err(Error::invalid("diffusion step must be at least 1"));
        }
        Ok(())
    }

    fn run(&self, x: &SignalBatch<F>, steps: &[usize], capture: bool) -> Result<(Act<F>, Option<BlockActivations<F>>, Tape<F>)> {
        self.check_input(x, steps)?;
        let arch = self.arch();
        let bsz = x.batch;
        let td = self.config().time_embedding_dim;

        let emb: Vec<F> = steps.iter().flat_map(|&t| timestep_embedding::<F>(t, td)).collect();
        let t1_pre = self.linear(&arch.time1, &emb, bsz);
        let t1 = silu_slice(&t1_pre);
        let t2_pre = self.linear(&arch.time2, &t1, bsz);
        let temb = silu_slice(&t2_pre);
        let film = |i: usize| self.linear(&arch.blocks[i].film, &temb, bsz);

        let mut captured = Vec::with_capacity(if capture { NUM_BLOCKS } else { 0 });
        let mut keep = |a: &Act<F>| {
            if capture {
                captured.push(a.clone());
            }
        };
        let mut block_tapes = Vec::with_capacity(NUM_BLOCKS);
        let mut down_caches = Vec::with_capacity(3);

        let (e0, in_cache) = self.conv(&arch.in_proj, &to_act(x));
        let mut skips = Vec::with_capacity(4);
        let mut h = e0;
        for i in 0..4 {
            let (a, tape) = self.block_forward(&arch.blocks[i], &h, film(i));
            block_tapes.push(tape);
            keep(&a);
            if i < 3 {
                let (p, cache) = self.conv(&arch.downs[i], &a);
                down_caches.push(cache);
                h = p;
            }
            skips.push(a);
        }

        let (m1, mid_down) = self.conv(&arch.mid_down, &skips[3]);
        let m1a = with_data(&m1, silu_slice(&m1.data));
        let (m3, mid_up) = self.conv(&arch.mid_up, &upsample_forward(&m1a));

        let mut up_caches = Vec::with_capacity(3);
        let mut h = m3;
        for i in 4..NUM_BLOCKS {
            let cat = h.concat(&skips[7 - i]);
            let (a, tape) = self.block_forward(&arch.blocks[i], &cat, film(i));
            block_tapes.push(tape);
            keep(&a);
            if i < NUM_BLOCKS - 1 {
                let (q, cache) = self.conv(&arch.ups[i - 4], &upsample_forward(&a));
                up_caches.push(cache);
                h = q;
            } else {
                h = a;
            }
        }
        let (out, out_cache) = self.conv(&arch.out_proj, &h);
        let tape = Tape {
            in_proj: in_cache,
            emb,
            t1_pre,
            t1,
            t2_pre,
            temb,
            blocks: block_tapes,
            downs: down_caches,
            mid_down,
            mid_pre: m1.data,
            mid_up,
            ups: up_caches,
            out_proj: out_cache,
        };
        let acts = capture.then_some(BlockActivations { blocks: captured });
        Ok((out, acts, tape))
    }

    /// Predicted noise (same layout as `x`) and, when `capture` is set, the
    /// outputs of all eight blocks.
    pub fn forward(&self, x: &SignalBatch<F>, steps: &[usize], capture: bool) -> Result<(Vec<F>, Option<BlockActivations<F>>)> {
        let (out, acts, _) = self.run(x, steps, capture)?;
        Ok((from_act(&out), acts))
    }

    fn backward(&self, dout: &Act<F>, tape: &Tape<F>) -> Vec<F> {
        let arch = self.arch();
        let bsz = dout.b;
        let mut grads = vec![F::ZERO; self.num_params()];
        let mut dtemb = vec![F::ZERO; tape.temb.len()];
        let mut film_back = |i: usize, dfilm: &[F], grads: &mut [F]| {
            let d = self.linear_back(&arch.blocks[i].film, dfilm, &tape.temb, bsz, grads);
            dtemb.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
        };

        let mut dh = self
            .conv_back(&arch.out_proj, dout, &tape.out_proj, &mut grads, true)
            .expect("input gradient requested");
        let mut dskips: Vec<Option<Act<F>>> = vec![None, None, None, None];
        for i in (4..NUM_BLOCKS).rev() {
            if i < NUM_BLOCKS - 1 {
                let dup = self
                    .conv_back(&arch.ups[i - 4], &dh, &tape.ups[i - 4], &mut grads, true)
                    .expect("input gradient requested");
                dh = upsample_backward(&dup);
            }
            let (dcat, dfilm) = self.block_backward(&arch.blocks[i], &dh, &tape.blocks[i], &mut grads);
            film_back(i, &dfilm, &mut grads);
            let prev_c = dcat.c - arch.blocks[7 - i].conv2.geom.cout;
            let (dprev, dskip) = dcat.split(prev_c);
            dskips[7 - i] = Some(dskip);
            dh = dprev;
        }

        let dm2 = self
            .conv_back(&arch.mid_up, &dh, &tape.mid_up, &mut grads, true)
            .expect("input gradient requested");
        let mut dm1 = upsample_backward(&dm2);
        silu_backward_inplace(&mut dm1.data, &tape.mid_pre);
        let mut da = self
            .conv_back(&arch.mid_down, &dm1, &tape.mid_down, &mut grads, true)
            .expect("input gradient requested");

        for i in (0..4).rev() {
            da.add_assign(dskips[i].as_ref().expect("skip gradient set on the up path"));
            let (dx, dfilm) = self.block_backward(&arch.blocks[i], &da, &tape.blocks[i], &mut grads);
            film_back(i, &dfilm, &mut grads);
            if i > 0 {
                da = self
                    .conv_back(&arch.downs[i - 1], &dx, &tape.downs[i - 1], &mut grads, true)
                    .expect("input gradient requested");
            } else {
                self.conv_back(&arch.in_proj, &dx, &tape.in_proj, &mut grads, false);
            }
        }

        silu_backward_inplace(&mut dtemb, &tape.t2_pre);
        let mut dt1 = self.linear_back(&arch.time2, &dtemb, &tape.t1, bsz, &mut grads);
        silu_backward_inplace(&mut dt1, &tape.t1_pre);
        self.linear_back(&arch.time1, &dt1, &tape.emb, bsz, &mut grads);
        grads
    }

    /// Noise-prediction loss for fixed draws and its exact gradient with
    /// respect to every parameter (same layout as [`ModelParams::data`]).
    pub fn loss_and_gradients(&self, s0: &SignalBatch<F>, draws: &LossDraws<F>, sched: &NoiseSchedule) -> Result<(f64, Vec<F>)> {
        let noisy = draws.noisy_batch(s0, sched)?;
        let (out, _, tape) = self.run(&noisy, &draws.steps, false)?;
        let eps_hat = from_act(&out);
        let loss = mse(&draws.eps, &eps_hat);
        let scale = F::from_f64(2.0 / eps_hat.len() as f64);
        let diff: Vec<F> = eps_hat.iter().zip(&draws.eps).map(|(&a, &b)| scale * (a - b)).collect();
        let dout = to_act(&SignalBatch::new(diff, s0.batch, s0.len)?);
        Ok((loss, self.backward(&dout, &tape)))
    }

    /// Gradient of the diffusion loss with fresh `(t, eps)` draws from `rng`.
    pub fn gradients<R: Rng + ?Sized>(&self, s0: &SignalBatch<F>, sched: &NoiseSchedule, rng: &mut R) -> Result<Vec<F>> {
        if s0.batch == 0 {
            return Err(Error::invalid("gradient of an empty batch"));
        }
        let draws = LossDraws::sample(s0.batch, s0.len, sched, rng);
        Ok(self.loss_and_gradients(s0, &draws, sched)?.1)
    }
}

impl<F: Real> NoiseModel<F> for ModelParams<F> {
    fn predict_noise(&self, x: &SignalBatch<F>, steps: &[usize]) -> Result<Vec<F>> {
        Ok(self.forward(x, steps, false)?.0)
    }

    fn check_length(&self, len: usize) -> Result<()> {
        UNetConfig::check_length(len)
    }
}
