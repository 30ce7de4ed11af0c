//! Renders the procedural glyph corpus as ASCII art: the raw class
//! templates, a rotated sample, and dilated/eroded variants.

use dsf::data::{class_template, morph, rotate_image, CANVAS};
use dsf::Result;

fn ascii(img: &[f64], h: usize, w: usize) -> String {
    let ramp: Vec<char> = " .:-=+*#%@".chars().collect();
    let mut out = String::new();
    for r in 0..h {
        for c in 0..w {
            let v = img[r * w + c].clamp(0.0, 1.0);
            let idx = (v * (ramp.len() - 1) as f64).round() as usize;
            out.push(ramp[idx]);
        }
        out.push('\n');
    }
    out
}

fn side_by_side(images: &[(&str, Vec<f64>)], h: usize, w: usize) -> String {
    let rendered: Vec<Vec<String>> = images
        .iter()
        .map(|(_, img)| ascii(img, h, w).lines().map(String::from).collect())
        .collect();
    let mut out = String::new();
    for (label, _) in images {
        out.push_str(&format!("{label:^w$}  ", w = w));
    }
    out.push('\n');
    for row in 0..h {
        for cols in &rendered {
            out.push_str(&cols[row]);
            out.push_str("  ");
        }
        out.push('\n');
    }
    out
}

fn main() -> Result<()> {
    println!("class templates 0–4:");
    let row: Vec<(String, Vec<f64>)> = (0..5)
        .map(|c| (format!("class {c}"), class_template(c, CANVAS)))
        .collect();
    let row_refs: Vec<(&str, Vec<f64>)> =
        row.iter().map(|(l, v)| (l.as_str(), v.clone())).collect();
    println!("{}", side_by_side(&row_refs, CANVAS, CANVAS));

    println!("class templates 5–9:");
    let row: Vec<(String, Vec<f64>)> = (5..10)
        .map(|c| (format!("class {c}"), class_template(c, CANVAS)))
        .collect();
    let row_refs: Vec<(&str, Vec<f64>)> =
        row.iter().map(|(l, v)| (l.as_str(), v.clone())).collect();
    println!("{}", side_by_side(&row_refs, CANVAS, CANVAS));

    let base = class_template(4, CANVAS);
    let variants = vec![
        ("0°".to_string(), base.clone()),
        ("+45°".to_string(), rotate_image(&base, CANVAS, CANVAS, 45.0)),
        ("−65°".to_string(), rotate_image(&base, CANVAS, CANVAS, -65.0)),
        ("dilate κ=3".to_string(), morph(&base, CANVAS, CANVAS, 3)?),
        ("erode κ=−2".to_string(), morph(&base, CANVAS, CANVAS, -2)?),
    ];
    let refs: Vec<(&str, Vec<f64>)> = variants
        .iter()
        .map(|(l, v)| (l.as_str(), v.clone()))
        .collect();
    println!("nuisance transformations of class 4:");
    println!("{}", side_by_side(&refs, CANVAS, CANVAS));
    Ok(())
}
