//! File I/O: NIfTI-1 volumes, NPY caches and BraTS case directories.

mod case;
pub mod nifti;
pub mod npy;

pub use case::{case_id_of, discover_cases, load_case, write_case, CaseBundle, CaseSuffixes};
pub use nifti::{read_labels, read_nifti, read_volume, write_labels, write_volume};
pub use npy::{read_npy, write_npy, NpyArray, NpyData};
