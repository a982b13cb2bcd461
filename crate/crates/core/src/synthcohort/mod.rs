//! Synthetic user cohorts standing in for production install logs, plus the
//! CSV dataset format and chronological splitting.

mod csvio;
mod generate;
mod record;
mod split;

pub use csvio::{layout_from_header, read_csv, read_csv_from, write_csv, write_csv_to};
pub use generate::{generate, CohortSpec, SpendDistribution};
pub use record::{Dataset, Layout, Segment, UserRecord};
pub use split::{day_boundaries, split, SplitSpec, Splits};
