#![no_main]

use gaze_core::data::raster::raster_from_grid;
use gaze_core::grid_csv::read_grid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = read_grid(data, "fuzz") {
        assert_eq!(grid.values.len(), grid.width * grid.height);
        assert!(grid.values.iter().all(|v| v.is_finite()));
        let _ = raster_from_grid(&grid);
    }
});
