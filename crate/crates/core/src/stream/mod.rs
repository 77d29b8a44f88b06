//! Synthetic LiDAR sequences with injectable domain shift, and sequence I/O.

mod config;
mod io;
mod scene;

pub use config::{format_config, parse_config, validate_configs, SceneConfig, ShiftConfig};
pub use io::{
    decode_points, decode_raw_labels, encode_labels, encode_points, format_poses, list_records,
    parse_poses, read_label_file, read_sequence, read_sequence_with_map, write_label_files,
    write_sequence, write_sequence_with_map, POSES_FILE,
};
pub use scene::{generate_sequence, sensor_pose};
