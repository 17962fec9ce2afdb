//! Deterministic procedural test images with repeated structure.
//!
//! All textures lie in `[0.1, 0.9]` and are built from smooth periodic
//! functions, so every pixel has many close matches elsewhere in the image.

use std::f32::consts::TAU;

use crate::tensor::{Domain, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    /// Soft-edged diagonal stripes.
    Stripes,
    /// Soft-edged checkerboard.
    Checker,
    /// Concentric rings around the image center.
    Rings,
    /// Interleaved horizontal and vertical bands.
    Weave,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::Rings,
        TextureKind::Weave,
    ];
}

fn soft_step(v: f32) -> f32 {
    (3.0 * v).tanh()
}

/// A `size x size` texture of the given kind in the unit-interval domain.
pub fn texture(kind: TextureKind, size: usize) -> Tensor {
    let center = (size as f32 - 1.0) / 2.0;
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            let v = match kind {
                TextureKind::Stripes => soft_step((TAU * (x + y) / 16.0).sin()),
                TextureKind::Checker => soft_step((TAU * x / 16.0).sin() * (TAU * y / 16.0).sin()),
                TextureKind::Rings => {
                    let r = ((x - center).powi(2) + (y - center).powi(2)).sqrt();
                    soft_step((TAU * r / 10.0).cos())
                }
                TextureKind::Weave => {
                    let a = (TAU * x / 12.0).sin();
                    let b = (TAU * y / 12.0).sin();
                    soft_step(
                        if (x / 12.0).floor() as i32 % 2 == (y / 12.0).floor() as i32 % 2 {
                            a
                        } else {
                            b
                        },
                    )
                }
            };
            0.5 + 0.4 * v
        })
        .collect();
    Tensor::new(vec![size, size], data, Domain::UnitInterval).expect("valid texture shape")
}

/// One texture of every kind.
pub fn texture_set(size: usize) -> Vec<Tensor> {
    TextureKind::ALL.iter().map(|&k| texture(k, size)).collect()
}
