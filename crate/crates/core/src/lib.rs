pub mod audio;
pub mod spectral;
pub mod augment;
pub mod gan;
pub mod adcrnn;
pub mod harness;
