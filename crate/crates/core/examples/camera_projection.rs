//! Crop and full-frame cameras from one weak-perspective estimate.

use quadfit::body::WeakCam;
use quadfit::camera::{bbox_info, crop_translation, focal_full, full_translation, BBox, CameraPair, CROP_RES};

fn main() -> quadfit::Result<()> {
    println!("focal for 3840x2160: {:.2}", focal_full(3840.0, 2160.0)?);
    println!("crop translation at s=1: {:?}", crop_translation(1.0, 0.0, 0.0)?);

    let bbox = BBox::new(1000.0, 500.0, 400.0, 3840.0, 2160.0)?;
    println!("bbox info: {:?}", bbox_info(&bbox)?);
    println!("full translation: {:?}", full_translation(0.8, 0.1, -0.05, &bbox)?);

    // A point in the model's z = 0 plane lands on the same full-frame pixel
    // whether projected directly or through the crop.
    let cams = CameraPair::from_weak(&[WeakCam { s: 0.8, px: 0.1, py: -0.05 }], &[bbox])?;
    let p = [[0.3, -0.2, 0.0]];
    let crop = cams.project_crop(0, &p)?[0];
    let via_crop = bbox.crop_to_full(crop[0], crop[1], CROP_RES as f64);
    let direct = cams.project_full(0, &p)?[0];
    println!("crop pixel {crop:?} -> full {via_crop:?}; direct full {direct:?}");
    Ok(())
}
