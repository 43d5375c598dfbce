//! Signal synthesis: modulators, channel impairments and noise models.

mod channel;
mod grid;
mod modulation;
mod noise;
mod signal;

pub use channel::{
    add_awgn, apply_impairments, rayleigh_coefficient, rayleigh_fade, rician_coefficient,
    rician_fade, scale_by, ImpairmentParams,
};
pub use grid::{clean_burst, lowpass_message, synth_dataset, synth_noiseless, ImpairmentRanges, SynthSpec};
pub use modulation::{modulate, modulate_analog, ModulationScheme, PulseShape};
pub use noise::{add_colored_noise, colored_noise, NoiseColor, MIN_COLORED_LEN};
pub use signal::{random_crop, IQSignal};
