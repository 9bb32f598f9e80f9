use crate::error::{Error, Result};
use crate::vocab::{self, TokenId};

pub const IMAGE_SIDE: usize = 16;
pub const PATCH_SIDE: usize = 4;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

pub const BACKGROUND: f32 = 0.05;
const DARK: f32 = 0.5;
const BRIGHT: f32 = 0.95;
const SMALL_RADIUS: f64 = 2.5;
const LARGE_RADIUS: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Size {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Intensity {
    Dark,
    Bright,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => SMALL_RADIUS,
            Size::Large => LARGE_RADIUS,
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];
    pub fn word(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top-left",
            Quadrant::TopRight => "top-right",
            Quadrant::BottomLeft => "bottom-left",
            Quadrant::BottomRight => "bottom-right",
        }
    }
    /// `(x, y)` of the quadrant center in pixel units.
    pub fn center(self) -> (f64, f64) {
        let q = (IMAGE_SIDE / 4) as f64;
        match self {
            Quadrant::TopLeft => (q, q),
            Quadrant::TopRight => (3.0 * q, q),
            Quadrant::BottomLeft => (q, 3.0 * q),
            Quadrant::BottomRight => (3.0 * q, 3.0 * q),
        }
    }
}

impl Intensity {
    pub const ALL: [Intensity; 2] = [Intensity::Dark, Intensity::Bright];
    pub fn word(self) -> &'static str {
        match self {
            Intensity::Dark => "dark",
            Intensity::Bright => "bright",
        }
    }
    pub fn level(self) -> f32 {
        match self {
            Intensity::Dark => DARK,
            Intensity::Bright => BRIGHT,
        }
    }
}

fn pick<E: Copy + PartialEq>(all: &[E], byte: u8, what: &str) -> Result<E> {
    all.get(byte as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("invalid {what} byte {byte}")))
}

fn find_word<E: Copy>(all: &[E], word: &str, f: impl Fn(E) -> &'static str, what: &str) -> Result<E> {
    all.iter()
        .copied()
        .find(|&e| f(e) == word)
        .ok_or_else(|| Error::InvalidCaption(format!("expected {what}, got `{word}`")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub size: Size,
    pub position: Quadrant,
    pub intensity: Intensity,
}

impl ShapeSpec {
    pub const COUNT: usize = 64;

    pub fn all() -> Vec<ShapeSpec> {
        (0..Self::COUNT).map(Self::from_index).collect()
    }

    pub fn from_index(i: usize) -> ShapeSpec {
        ShapeSpec {
            kind: ShapeKind::ALL[i % 4],
            size: Size::ALL[(i / 4) % 2],
            position: Quadrant::ALL[(i / 8) % 4],
            intensity: Intensity::ALL[(i / 32) % 2],
        }
    }

    pub fn index(&self) -> usize {
        self.kind as usize + 4 * (self.size as usize) + 8 * (self.position as usize) + 32 * (self.intensity as usize)
    }

    pub fn to_bytes(&self) -> [u8; 4] {
        [self.kind as u8, self.size as u8, self.position as u8, self.intensity as u8]
    }

    pub fn from_bytes(b: [u8; 4]) -> Result<Self> {
        Ok(ShapeSpec {
            kind: pick(&ShapeKind::ALL, b[0], "shape")?,
            size: pick(&Size::ALL, b[1], "size")?,
            position: pick(&Quadrant::ALL, b[2], "position")?,
            intensity: pick(&Intensity::ALL, b[3], "intensity")?,
        })
    }

    /// Caption text: `a <size> <intensity> <shape> at <position>`.
    pub fn caption_text(&self) -> String {
        format!(
            "a {} {} {} at {}",
            self.size.word(),
            self.intensity.word(),
            self.kind.word(),
            self.position.word()
        )
    }

    pub fn caption(&self) -> Vec<TokenId> {
        vocab::tokenize(&self.caption_text()).expect("caption words are in the vocabulary")
    }

    /// Inverse of [`ShapeSpec::caption`]. Trailing `[EOS]` is accepted.
    pub fn parse_caption(tokens: &[TokenId]) -> Result<ShapeSpec> {
        let tokens = match tokens.last() {
            Some(&vocab::EOS) => &tokens[..tokens.len() - 1],
            _ => tokens,
        };
        let words: Vec<String> = tokens.iter().map(|&t| vocab::word(t)).collect();
        if words.len() != 6 || words[0] != "a" || words[4] != "at" {
            return Err(Error::InvalidCaption(words.join(" ")));
        }
        Ok(ShapeSpec {
            size: find_word(&Size::ALL, &words[1], Size::word, "size")?,
            intensity: find_word(&Intensity::ALL, &words[2], Intensity::word, "intensity")?,
            kind: find_word(&ShapeKind::ALL, &words[3], ShapeKind::word, "shape")?,
            position: find_word(&Quadrant::ALL, &words[5], Quadrant::word, "position")?,
        })
    }

    /// Whether the pixel with center `(px, py)` lies inside the shape
    /// centered at `(cx, cy)`.
    pub fn covers(&self, cx: f64, cy: f64, px: f64, py: f64) -> bool {
        let r = self.size.radius();
        let (ox, oy) = (px - cx, py - cy);
        match self.kind {
            ShapeKind::Circle => ox * ox + oy * oy <= r * r,
            ShapeKind::Square => ox.abs() <= r && oy.abs() <= r,
            // apex up, base at the bottom
            ShapeKind::Triangle => oy.abs() <= r && ox.abs() <= (oy + r) / 2.0,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (ox.abs() <= arm && oy.abs() <= r) || (oy.abs() <= arm && ox.abs() <= r)
            }
        }
    }
}

/// 16×16 grayscale image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::Format(format!("image needs {PIXELS} pixels, got {}", pixels.len())));
        }
        Ok(Self {
            pixels: pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(value: f32) -> Self {
        Self::new(vec![value; PIXELS]).expect("fixed size")
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    /// Pixels of 4×4 patch `p` (raster order over patches and within).
    pub fn patch(&self, p: usize) -> [f32; PATCH_SIDE * PATCH_SIDE] {
        let per_row = IMAGE_SIDE / PATCH_SIDE;
        let (pr, pc) = (p / per_row, p % per_row);
        let mut out = [0.0; PATCH_SIDE * PATCH_SIDE];
        for r in 0..PATCH_SIDE {
            for c in 0..PATCH_SIDE {
                out[r * PATCH_SIDE + c] = self.at(pr * PATCH_SIDE + r, pc * PATCH_SIDE + c);
            }
        }
        out
    }

    pub fn from_patches(patches: &[Vec<f32>]) -> Result<Self> {
        let per_row = IMAGE_SIDE / PATCH_SIDE;
        if patches.len() != per_row * per_row || patches.iter().any(|p| p.len() != PATCH_SIDE * PATCH_SIDE) {
            return Err(Error::Format("expected 16 patches of 16 pixels".into()));
        }
        let mut px = vec![0.0; PIXELS];
        for (p, patch) in patches.iter().enumerate() {
            let (pr, pc) = (p / per_row, p % per_row);
            for r in 0..PATCH_SIDE {
                for c in 0..PATCH_SIDE {
                    px[(pr * PATCH_SIDE + r) * IMAGE_SIDE + pc * PATCH_SIDE + c] = patch[r * PATCH_SIDE + c];
                }
            }
        }
        Self::new(px)
    }

    /// Binary PGM (P5), 8-bit.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        out
    }
}

/// Rasterizes `spec` with its center shifted by `(dx, dy)` pixels.
pub fn render_shifted(spec: &ShapeSpec, dx: i32, dy: i32) -> Image {
    let (cx, cy) = spec.position.center();
    let (cx, cy) = (cx + dx as f64, cy + dy as f64);
    let level = spec.intensity.level();
    let mut px = vec![BACKGROUND; PIXELS];
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            if spec.covers(cx, cy, col as f64 + 0.5, row as f64 + 0.5) {
                px[row * IMAGE_SIDE + col] = level;
            }
        }
    }
    Image::new(px).expect("fixed size")
}

/// Deterministic rasterization of a spec at its nominal position.
pub fn render(spec: &ShapeSpec) -> Image {
    render_shifted(spec, 0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_bright_square_fills_top_left_quadrant() {
        let spec = ShapeSpec {
            kind: ShapeKind::Square,
            size: Size::Large,
            position: Quadrant::TopLeft,
            intensity: Intensity::Bright,
        };
        let img = render(&spec);
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                let inside = r < 8 && c < 8;
                assert_eq!(img.at(r, c) > BACKGROUND, inside, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn all_specs_render_distinctly() {
        let imgs: Vec<Image> = ShapeSpec::all().iter().map(render).collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert_ne!(imgs[i], imgs[j], "specs {i} and {j}");
            }
        }
    }

    #[test]
    fn index_and_bytes_round_trip() {
        for (i, s) in ShapeSpec::all().iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(ShapeSpec::from_bytes(s.to_bytes()).unwrap(), *s);
        }
        assert!(ShapeSpec::from_bytes([9, 0, 0, 0]).is_err());
    }

    #[test]
    fn caption_template() {
        let spec = ShapeSpec {
            kind: ShapeKind::Circle,
            size: Size::Small,
            position: Quadrant::TopLeft,
            intensity: Intensity::Bright,
        };
        assert_eq!(spec.caption(), vocab::tokenize("a small bright circle at top-left").unwrap());
    }

    #[test]
    fn caption_parse_is_inverse() {
        for s in ShapeSpec::all() {
            assert_eq!(ShapeSpec::parse_caption(&s.caption()).unwrap(), s);
        }
        let bad = vocab::tokenize("a small bright at circle top-left").unwrap();
        assert!(ShapeSpec::parse_caption(&bad).is_err());
    }

    #[test]
    fn patches_round_trip() {
        let img = render(&ShapeSpec::from_index(37));
        let patches: Vec<Vec<f32>> = (0..16).map(|p| img.patch(p).to_vec()).collect();
        assert_eq!(Image::from_patches(&patches).unwrap(), img);
    }
}
