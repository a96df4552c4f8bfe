//! Masked-region metrics on a pair of images.
//!
//! `cargo run --example metrics`

use refcomplete::metrics::{evaluate_group, masked_psnr, masked_ssim, MetricConfig};
use refcomplete::{Mask, Raster};

fn main() -> refcomplete::Result<()> {
    let truth = Raster::from_fn(48, 48, |y, x| [y as f32 / 48.0, x as f32 / 48.0, 0.5]);
    let shifted = Raster::from_fn(48, 48, |y, x| truth.pixel(y, x).map(|v| (v + 0.1).min(1.0)));
    let mask = Mask::from_fn(48, 48, |y, x| (8..30).contains(&y) && (10..40).contains(&x));

    println!("PSNR of a +0.1 shift: {:.3} dB", masked_psnr(&shifted, &truth, &mask)?);
    println!("SSIM identity: {}", masked_ssim(&truth, &truth, &mask)?);
    // Pixels outside the mask never count.
    let mut noisy_outside = truth.clone();
    noisy_outside.set_pixel(0, 0, [1.0, 0.0, 1.0]);
    println!("PSNR with a change outside the mask: {}", masked_psnr(&noisy_outside, &truth, &mask)?);

    let row = evaluate_group("demo", &shifted, &truth, &mask, Some("a figure wearing red top"), &MetricConfig::default())?;
    for (metric, value) in &row.values {
        println!("{:>8} {value:.4}", metric.title());
    }
    Ok(())
}
