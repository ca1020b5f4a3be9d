//! Render each shape family at a few azimuths and write the views as PPM.

use std::path::PathBuf;

use z2h::io::write_pnm;
use z2h::scene::{ShapeFamily, Sprite};
use z2h::*;

fn main() -> std::result::Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "sprites".into()));
    std::fs::create_dir_all(&dir)?;
    for family in ShapeFamily::ALL {
        let sprite = Sprite::new(family);
        for (i, az) in [0.0f32, 0.8, 1.6, 2.4].into_iter().enumerate() {
            let img = sprite.render(Pose::new(0.3, az, 1.0))?;
            write_pnm(&dir.join(format!("{}_{i}.ppm", family.name())), &img)?;
        }
        println!("{}: 4 views", family.name());
    }
    println!("written to {}", dir.display());
    Ok(())
}
