//! Generated toy datasets: bright disks on dark noise.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Writes `count` image/mask pairs of size `size × size` under
/// `root/images` and `root/masks`, named `disk_000.png`, ...
pub fn write_disk_dataset(root: &Path, count: usize, size: u32, seed: u64) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    for i in 0..count {
        let r = rng.random_range(0.15 * s..0.3 * s);
        let cx = rng.random_range(r..s - r);
        let cy = rng.random_range(r..s - r);
        let inside = |x: u32, y: u32| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            dx * dx + dy * dy <= r * r
        };
        let mut img = RgbImage::new(size, size);
        let mut mask = GrayImage::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let noise: u8 = rng.random_range(0..60);
                let px = if inside(x, y) {
                    let v = 255 - noise / 2;
                    Rgb([v, v, v.saturating_sub(20)])
                } else {
                    Rgb([noise, noise / 2 + 10, noise])
                };
                img.put_pixel(x, y, px);
                mask.put_pixel(x, y, Luma([if inside(x, y) { 255 } else { 0 }]));
            }
        }
        let name = format!("disk_{i:03}.png");
        let save_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Image { path, source }
        };
        let (ip, mp) = (images.join(&name), masks.join(&name));
        img.save(&ip).map_err(save_err(&ip))?;
        mask.save(&mp).map_err(save_err(&mp))?;
    }
    Ok(())
}
