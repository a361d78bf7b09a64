//! Point-cloud geometry: sampling, neighbor search, grouping, Chamfer
//! distance, synthetic shapes, and the text point format.

mod chamfer;
mod cloud;
mod grid;
mod sampling;
mod synth;

pub use chamfer::{chamfer, chamfer_loss};
pub use cloud::{points_to_tensor, sq_dist, tensor_to_points, Point, PointCloud};
pub use sampling::{centroids, fps, group, knn, GroupedTokens};
pub use synth::{synth_shape, ShapeKind};
