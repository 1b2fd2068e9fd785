use serde::{Deserialize, Serialize};

use super::SynthError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    L,
    Diamond,
    Star,
    H,
    T,
    U,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 12] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Bar,
        ShapeKind::L,
        ShapeKind::Diamond,
        ShapeKind::Star,
        ShapeKind::H,
        ShapeKind::T,
        ShapeKind::U,
    ];

    /// Membership test in the shape's local frame, `u, v ∈ [-1, 1]` with `v`
    /// pointing down.
    pub fn contains(self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Circle => r2 <= 1.0,
            ShapeKind::Square => true,
            ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Cross => u.abs() <= 0.3 || v.abs() <= 0.3,
            ShapeKind::Ring => (0.3..=1.0).contains(&r2),
            ShapeKind::Bar => v.abs() <= 0.35,
            ShapeKind::L => u <= -0.35 || v >= 0.35,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Star => {
                let theta = v.atan2(u);
                let lobe = ((5.0 * theta).cos() + 1.0) / 2.0;
                r2.sqrt() <= 0.4 + 0.6 * lobe * lobe
            }
            ShapeKind::H => u.abs() >= 0.55 || v.abs() <= 0.2,
            ShapeKind::T => v <= -0.45 || u.abs() <= 0.25,
            ShapeKind::U => u.abs() >= 0.55 || v >= 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Striped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorFamily {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ColorFamily {
    pub const ALL: [ColorFamily; 6] = [
        ColorFamily::Red,
        ColorFamily::Green,
        ColorFamily::Blue,
        ColorFamily::Yellow,
        ColorFamily::Magenta,
        ColorFamily::Cyan,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorFamily::Red => [0.95, 0.2, 0.15],
            ColorFamily::Green => [0.2, 0.9, 0.25],
            ColorFamily::Blue => [0.2, 0.35, 0.95],
            ColorFamily::Yellow => [0.95, 0.9, 0.2],
            ColorFamily::Magenta => [0.9, 0.2, 0.9],
            ColorFamily::Cyan => [0.2, 0.9, 0.9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub kind: ShapeKind,
    pub texture: Texture,
    pub color: ColorFamily,
}

/// Number of distinct (kind, texture, color) classes.
pub const MAX_CLASSES: usize = 12 * 2 * 6;

/// The `i`-th class of the fixed catalogue. The first 12 ids walk every kind
/// solid, the next 12 every kind striped; later ids shift the color so every
/// triple stays unique up to [`MAX_CLASSES`].
pub fn class_spec(id: usize) -> Result<ClassSpec, SynthError> {
    if id >= MAX_CLASSES {
        return Err(SynthError::InsufficientClasses {
            requested: id + 1,
            available: MAX_CLASSES,
        });
    }
    let kind = ShapeKind::ALL[id % 12];
    let texture = if (id / 12) % 2 == 0 { Texture::Solid } else { Texture::Striped };
    let color = ColorFamily::ALL[(id + id / 24) % 6];
    Ok(ClassSpec { id, kind, texture, color })
}

pub fn class_catalog(n: usize) -> Result<Vec<ClassSpec>, SynthError> {
    if n > MAX_CLASSES {
        return Err(SynthError::InsufficientClasses {
            requested: n,
            available: MAX_CLASSES,
        });
    }
    (0..n).map(class_spec).collect()
}
