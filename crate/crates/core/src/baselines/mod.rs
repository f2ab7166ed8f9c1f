//! Toy-scale versions of two parametric transfer baselines: sensitivity
//! extraction with SVD-initialized adapters, and neuron location with a
//! hypernetwork that maps teacher deltas to student deltas.

mod laten;
mod seeking;

pub use laten::{
    ffn_neuron_scores, laten_align, laten_inject, laten_locate, laten_locate_from, laten_transfer, neuron_slices,
    select_top_neurons, HyperNet, LatenAlignReport, LatenConfig, NeuronDelta, NeuronSlices,
};
pub use seeking::{
    accumulate_sensitivity, seeking_extract, seeking_lora_init, seeking_sensitivity, seeking_transfer, select_layers,
    ExtractedBlock, LayerSensitivity, LoraPair, SeekingConfig, SeekingOutcome, SensitivityMap, SCORED_TENSORS,
};
