//! Domain datasets: synthetic shift generators, file ingestion, noise
//! corruption and minibatching.

mod batch;
mod dataset;
mod idx;
mod sparse;
mod synth;

pub use batch::{batch_indices, batch_iter, paired_batches, Batch};
pub use dataset::DomainDataset;
pub use idx::{
    read_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use sparse::{parse_sparse_bow, read_sparse_bow, write_sparse_bow};
pub use synth::{add_gaussian_noise, make_blobs_pair, make_two_moons_pair, BlobsSpec, ShiftSpec, MOONS_CENTER};
