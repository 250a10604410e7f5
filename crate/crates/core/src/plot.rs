//! Small raster charts (PNG) with a built-in 3×5 pixel font.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRAY: Rgb<u8> = Rgb([200, 200, 200]);
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];
const SCALE: u32 = 2;

pub fn series_color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn glyph(c: char) -> &'static str {
    match c.to_ascii_uppercase() {
        '0' => "111101101101111",
        '1' => "010110010010111",
        '2' => "111001111100111",
        '3' => "111001111001111",
        '4' => "101101111001001",
        '5' => "111100111001111",
        '6' => "111100111101111",
        '7' => "111001001001001",
        '8' => "111101111101111",
        '9' => "111101111001111",
        'A' => "010101111101101",
        'B' => "110101110101110",
        'C' => "011100100100011",
        'D' => "110101101101110",
        'E' => "111100110100111",
        'F' => "111100110100100",
        'G' => "011100101101011",
        'H' => "101101111101101",
        'I' => "111010010010111",
        'J' => "001001001101010",
        'K' => "101101110101101",
        'L' => "100100100100111",
        'M' => "101111111101101",
        'N' => "110101101101101",
        'O' => "010101101101010",
        'P' => "110101110100100",
        'Q' => "010101101110011",
        'R' => "110101110101101",
        'S' => "011100010001110",
        'T' => "111010010010010",
        'U' => "101101101101111",
        'V' => "101101101101010",
        'W' => "101101111111101",
        'X' => "101101010101101",
        'Y' => "101101010010010",
        'Z' => "111001010100111",
        '.' => "000000000000010",
        '-' => "000000111000000",
        ':' => "000010000010000",
        '=' => "000111000111000",
        '/' => "001001010100100",
        '_' => "000000000000111",
        '+' => "000010111010000",
        '(' => "001010010010001",
        ')' => "100010010010100",
        _ => "000000000000000",
    }
}

pub fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * 4 * SCALE
}

pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, s: &str, color: Rgb<u8>) {
    for (i, c) in s.chars().enumerate() {
        for (k, bit) in glyph(c).bytes().enumerate() {
            if bit != b'1' {
                continue;
            }
            let (gx, gy) = ((k % 3) as i64, (k / 3) as i64);
            for dy in 0..SCALE as i64 {
                for dx in 0..SCALE as i64 {
                    put(img, x + (i as i64 * 4 + gx) * SCALE as i64 + dx, y + gy * SCALE as i64 + dy, color);
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

pub fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        for x in x0.min(x1)..=x0.max(x1) {
            put(img, x, y, c);
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

struct Frame {
    left: i64,
    right: i64,
    top: i64,
    bottom: i64,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> i64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        self.bottom - (t * (self.bottom - self.top) as f64).round() as i64
    }

    fn draw_axes(&self, img: &mut RgbImage, title: &str) {
        draw_text(img, self.left, 8, title, BLACK);
        for k in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * k as f64 / 4.0;
            let y = self.y(v);
            draw_line(img, (self.left, y), (self.right, y), GRAY);
            let label = fmt_tick(v);
            draw_text(img, self.left - 6 - text_width(&label) as i64, y - 5, &label, BLACK);
        }
        draw_line(img, (self.left, self.top), (self.left, self.bottom), BLACK);
        draw_line(img, (self.left, self.bottom), (self.right, self.bottom), BLACK);
    }
}

fn range(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One polyline per series against its sample index.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let (w, h) = (720u32, 420u32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let (lo, hi) = range(series.iter().flat_map(|s| s.1.iter().copied()), false);
    let frame = Frame {
        left: 90,
        right: w as i64 - 20,
        top: 30,
        bottom: h as i64 - 60,
        lo,
        hi,
    };
    frame.draw_axes(&mut img, title);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| frame.left + ((frame.right - frame.left) as f64 * i as f64 / (n - 1) as f64).round() as i64;
    for (k, (name, values)) in series.iter().enumerate() {
        let c = series_color(k);
        let pts: Vec<(i64, i64)> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (x(i), frame.y(v)))
            .collect();
        for p in pts.windows(2) {
            draw_line(&mut img, p[0], p[1], c);
        }
        if pts.len() == 1 {
            fill_rect(&mut img, pts[0].0 - 1, pts[0].1 - 1, pts[0].0 + 1, pts[0].1 + 1, c);
        }
        let ly = h as i64 - 40 + 14 * (k as i64 / 3);
        let lx = frame.left + 210 * (k as i64 % 3);
        fill_rect(&mut img, lx, ly, lx + 12, ly + 8, c);
        draw_text(&mut img, lx + 18, ly, name, BLACK);
    }
    draw_text(&mut img, frame.right - text_width(x_label) as i64, frame.bottom + 6, x_label, BLACK);
    save(&img, path)
}

/// Vertical bars from a zero baseline, one per labelled value.
pub fn bar_chart(title: &str, bars: &[(String, f64)], path: &Path) -> Result<()> {
    let slot = bars
        .iter()
        .map(|b| text_width(&b.0) + 12)
        .max()
        .unwrap_or(40)
        .max(40);
    let w = (110 + slot * bars.len() as u32).max(360);
    let h = 380u32;
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let (lo, hi) = range(bars.iter().map(|b| b.1), true);
    let frame = Frame {
        left: 90,
        right: w as i64 - 20,
        top: 30,
        bottom: h as i64 - 40,
        lo,
        hi,
    };
    frame.draw_axes(&mut img, title);
    let zero = frame.y(0.0);
    draw_line(&mut img, (frame.left, zero), (frame.right, zero), BLACK);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x0 = frame.left + 10 + (i as u32 * slot) as i64;
        let x1 = x0 + slot as i64 - 16;
        if v.is_finite() {
            fill_rect(&mut img, x0, zero, x1, frame.y(*v), series_color(0));
        }
        draw_text(&mut img, x0, frame.bottom + 8, label, BLACK);
    }
    save(&img, path)
}
