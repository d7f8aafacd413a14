//! Field and coordinate ordering shared by datasets, network heads and
//! residuals.
//!
//! Plane strain: `(u_x, u_y, s_xx, s_yy, s_xy)` over `(x, y, t)`.
//! Solid: `(u_x, u_y, u_z, s_xx, s_yy, s_zz, s_xy, s_yz, s_xz)` over
//! `(x, y, z, t)`. Surrogate inputs append `mu` after `t`.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dimension {
    Plane,
    Solid,
}

pub const PLANE_FIELDS: [&str; 5] = ["u_x", "u_y", "s_xx", "s_yy", "s_xy"];
pub const SOLID_FIELDS: [&str; 9] = ["u_x", "u_y", "u_z", "s_xx", "s_yy", "s_zz", "s_xy", "s_yz", "s_xz"];

impl Dimension {
    pub fn n_space(self) -> usize {
        match self {
            Dimension::Plane => 2,
            Dimension::Solid => 3,
        }
    }

    pub fn n_fields(self) -> usize {
        self.field_names().len()
    }

    pub fn field_names(self) -> &'static [&'static str] {
        match self {
            Dimension::Plane => &PLANE_FIELDS,
            Dimension::Solid => &SOLID_FIELDS,
        }
    }

    pub fn space_names(self) -> &'static [&'static str] {
        &["x", "y", "z"][..self.n_space()]
    }

    /// Column of `t` among the inputs.
    pub fn time_column(self) -> usize {
        self.n_space()
    }

    /// Displacement components come first in field order.
    pub fn n_displacements(self) -> usize {
        self.n_space()
    }

    /// Number of network inputs.
    pub fn n_inputs(self, surrogate: bool) -> usize {
        self.n_space() + 1 + usize::from(surrogate)
    }

    pub fn field_index(self, name: &str) -> Option<usize> {
        self.field_names().iter().position(|&f| f == name)
    }

    /// Field index of the stress component `s_ij` (axes 0..n_space).
    pub fn stress_index(self, i: usize, j: usize) -> usize {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        let name = match (a, b) {
            (0, 0) => "s_xx",
            (1, 1) => "s_yy",
            (2, 2) => "s_zz",
            (0, 1) => "s_xy",
            (1, 2) => "s_yz",
            (0, 2) => "s_xz",
            _ => panic!("stress axes out of range"),
        };
        self.field_index(name).expect("stress component for dimension")
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Plane => "2d",
            Dimension::Solid => "3d",
        })
    }
}

impl FromStr for Dimension {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "2d" | "2" | "plane" => Ok(Dimension::Plane),
            "3d" | "3" | "solid" => Ok(Dimension::Solid),
            other => Err(format!("unknown dimension `{other}` (expected 2d or 3d)")),
        }
    }
}
