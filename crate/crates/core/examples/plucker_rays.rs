//! Plücker ray map of a look-at camera and the effect of moving it.

use camrope::geometry::{compute_plucker_map, CameraFrame};
use camrope::Result;
use nalgebra::Vector3;

fn main() -> Result<()> {
    let cam = CameraFrame::look_at(
        Vector3::new(4.0, 0.0, 1.0),
        Vector3::zeros(),
        Vector3::z(),
        8,
        8,
        9.0,
        0.0,
    )?;
    let map = compute_plucker_map(&cam)?;
    let (v, u) = (4, 4);
    let d = map.direction(v, u);
    let m = map.moment(v, u);
    println!("center ray d = {:.4?}", d.as_slice());
    println!("center ray m = {:.4?}", m.as_slice());
    println!("d . m = {:.2e}", d.dot(&m));

    // Shifting the camera center by t changes the moment by t x d.
    let shift = Vector3::new(0.0, 0.5, 0.0);
    let mut moved = cam.clone();
    moved.translation -= moved.rotation * shift;
    let m2 = compute_plucker_map(&moved)?.moment(v, u);
    println!("moment shift error = {:.2e}", (m2 - m - shift.cross(&d)).norm());
    Ok(())
}
