//! PSNR, SSIM and foreground IoU between two renders of the same sprite.

use std::f32::consts::PI;

use z2h::metrics::{psnr_capped, IOU_BACKGROUND, IOU_TAU};
use z2h::scene::{ShapeFamily, Sprite};
use z2h::*;

fn main() -> z2h::Result<()> {
    let sprite = Sprite::new(ShapeFamily::Box);
    let front = sprite.render(Pose::new(0.0, 0.0, 1.0))?;
    for az in [0.0, PI / 16.0, PI / 4.0, PI / 2.0] {
        let other = sprite.render(Pose::new(0.0, az, 1.0))?;
        println!(
            "azimuth {az:.3}: psnr {:6.2} dB  ssim {:.4}  iou {:.3}",
            psnr_capped(&front, &other)?,
            ssim(&front, &other)?,
            iou_mask(&front, &other, IOU_BACKGROUND, IOU_TAU)?
        );
    }
    Ok(())
}
