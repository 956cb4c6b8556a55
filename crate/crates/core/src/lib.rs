pub mod deprivilege;
pub mod harness;
pub mod isa;
pub mod machine;
pub mod metrics;
pub mod mmu;
pub mod monitor;
pub mod policy;
pub mod sgt;
pub mod trace;
