//! File formats: MetaImage volumes, PFT tables, reports and synthetic phantoms.
//!
//! Byte-level layouts are described in `docs/formats.md`.

pub mod mhd;
pub mod pft;
pub mod phantom;
pub mod report;
pub mod rng;

pub use mhd::{
    read_header, read_labels, read_mask, read_probabilities, read_tensor, read_volume, read_volume_with_classes, write_labels,
    write_probabilities, write_tensor, write_volume, ContentKind, ElementType, VolumeData, VolumeHeader,
};
pub use pft::{read_pft_csv, write_pft_csv, PftTable};
pub use phantom::{synthesize_phantom, MetricCard, Perturbation, Phantom, PhantomSpec, Primitive};
pub use report::{format_real, render_report, write_report, Report, ReportFormat, ReportMetadata};
pub use rng::XorShift64Star;
