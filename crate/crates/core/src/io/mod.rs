//! File formats: tabular inputs, the sample archive and summary outputs.

mod archive;
mod summary;
mod tables;

pub use archive::{
    file_checksum, read_header, read_samples, write_samples, ArchiveHeader, SampleArchive,
    ARCHIVE_MAGIC, ARCHIVE_VERSION,
};
pub use summary::{
    read_raster, read_summary_csv, write_raster, write_raster_values, write_summary_csv,
    SummaryField, NODATA,
};
pub use tables::{read_cell_counts, read_townships, write_cell_counts, write_townships};
