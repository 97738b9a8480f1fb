//! Contour overlays: prediction in blue, ground truth in green.

use vesselprior::metrics::{extract_surface, BinaryMask};
use vesselprior::{Result, Tensor};

const BLUE: [f64; 3] = [0.0, 0.0, 1.0];
const GREEN: [f64; 3] = [0.0, 1.0, 0.0];

fn draw(rgb: &mut [f64], h: usize, w: usize, mask: &BinaryMask, colour: [f64; 3]) {
    // Surface points are pixel indices at unit spacing regardless of mask spacing.
    let (sr, sc) = mask.spacing();
    for &(r, c) in &extract_surface(mask).points {
        let (r, c) = ((r / sr).round() as usize, (c / sc).round() as usize);
        for (ch, v) in colour.iter().enumerate() {
            rgb[ch * h * w + r * w + c] = *v;
        }
    }
}

/// `(3, h, w)` copy of `image` (grey is replicated) with mask contours drawn
/// on top. The prediction is drawn last so it stays visible where both meet.
pub fn render(image: &Tensor, pred: &BinaryMask, gt: Option<&BinaryMask>) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut rgb: Vec<f64> = (0..3).flat_map(|ch| src[(ch % c) * h * w..(ch % c + 1) * h * w].to_vec()).collect();
    if let Some(g) = gt {
        draw(&mut rgb, h, w, g, GREEN);
    }
    draw(&mut rgb, h, w, pred, BLUE);
    Tensor::new(&[3, h, w], rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contours_are_coloured() {
        let img = Tensor::full(&[1, 4, 4], 0.5);
        let pred = BinaryMask::new(4, 4, (0..16).map(|i| i == 5).collect()).unwrap();
        let gt = BinaryMask::new(4, 4, (0..16).map(|i| i == 10).collect()).unwrap();
        let out = render(&img, &pred, Some(&gt)).unwrap();
        let px = |i: usize| [out.data()[i], out.data()[16 + i], out.data()[32 + i]];
        assert_eq!(px(5), BLUE);
        assert_eq!(px(10), GREEN);
        assert_eq!(px(0), [0.5; 3]);
    }
}
