//! Backbone networks and the PTU transfer assemblies.

mod assembly;
mod build;
mod spec;

pub use assembly::{
    assemble_ptu_cnn, assemble_ptu_rnn, AssembledModel, Assembly, ForwardPass, PtuOptions,
    SourceNet,
};
pub use build::{apply_transfer_state, build_cnn, build_network, build_rnn, FreezeMask};
pub use spec::{Family, InputSpec, LayerSpec, NetworkSpec, TransferState};
