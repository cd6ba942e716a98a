use super::ppm::RgbImage;

/// Source coordinate for output index `dst` using half-pixel centers, split
/// into the two neighbouring source indices and the weight of the second.
fn sample_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize with half-pixel centers. Each output sample is a convex
/// combination of input samples, rounded to the nearest integer.
pub fn resize_bilinear(image: &RgbImage, target_h: usize, target_w: usize) -> RgbImage {
    assert!(target_h > 0 && target_w > 0, "target extent must be positive");
    if (target_h, target_w) == (image.height, image.width) {
        return image.clone();
    }
    let cols: Vec<_> = (0..target_w)
        .map(|x| sample_axis(x, image.width, target_w))
        .collect();
    let mut data = Vec::with_capacity(target_h * target_w * 3);
    for y in 0..target_h {
        let (y0, y1, fy) = sample_axis(y, image.height, target_h);
        for &(x0, x1, fx) in &cols {
            let p00 = image.pixel(x0, y0);
            let p01 = image.pixel(x1, y0);
            let p10 = image.pixel(x0, y1);
            let p11 = image.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage {
        width: target_w,
        height: target_h,
        data,
    }
}
