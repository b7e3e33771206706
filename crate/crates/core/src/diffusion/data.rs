use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Rendering style of an object. `Plain` is an isotropic blob; `Ring` and
/// `Halo` place points on circles of radius `r_ring` and `2·r_ring`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Plain,
    Ring,
    Halo,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Plain, Style::Ring, Style::Halo];

    pub fn id(self) -> usize {
        match self {
            Style::Plain => 0,
            Style::Ring => 1,
            Style::Halo => 2,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Style::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("unknown style id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Plain => "plain",
            Style::Ring => "ring",
            Style::Halo => "halo",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Parameter(format!("unknown style {name:?}")))
    }

    /// Circle radius in units of `r_ring`, if the style draws a circle.
    pub fn radius_multiple(self) -> Option<f32> {
        match self {
            Style::Plain => None,
            Style::Ring => Some(1.0),
            Style::Halo => Some(2.0),
        }
    }
}

/// The toy analog of a prompt: which object, drawn in which style.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub object_id: usize,
    pub style: Style,
}

impl Condition {
    pub fn new(object_id: usize, style: Style) -> Self {
        Self { object_id, style }
    }

    pub fn style_id(&self) -> usize {
        self.style.id()
    }
}

/// Ground-truth distribution of the toy model: `O` object centers, each
/// rendered as a Gaussian blob or as a noisy circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub centers: Vec<[f32; 2]>,
    pub plain_std: f32,
    pub ring_radius: f32,
    pub ring_std: f32,
}

impl Default for ToyDataset {
    /// Eight centers on a 4×2 grid with spacing 3.
    fn default() -> Self {
        let centers = [-1.5f32, 1.5]
            .iter()
            .flat_map(|&y| [-4.5f32, -1.5, 1.5, 4.5].map(|x| [x, y]))
            .collect();
        Self {
            centers,
            plain_std: 0.12,
            ring_radius: 0.5,
            ring_std: 0.04,
        }
    }
}

impl ToyDataset {
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Parameter("dataset needs at least one center".into()));
        }
        if !(self.plain_std > 0.0 && self.ring_std > 0.0 && self.ring_radius > 0.0) {
            return Err(Error::Parameter(
                "plain_std, ring_std and ring_radius must be positive".into(),
            ));
        }
        let min_gap = 4.0 * self.ring_radius;
        for (i, a) in self.centers.iter().enumerate() {
            for b in &self.centers[i + 1..] {
                let gap = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                if gap <= min_gap {
                    return Err(Error::Parameter(format!(
                        "centers {a:?} and {b:?} closer than 4·r_ring = {min_gap}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Standard deviation of one coordinate under the uniform mixture over
    /// objects and styles, averaged over the two axes.
    pub fn coordinate_std(&self) -> f32 {
        let n = self.centers.len() as f64;
        let mut var = 0.0;
        for axis in 0..2 {
            let mean = self.centers.iter().map(|c| f64::from(c[axis])).sum::<f64>() / n;
            var += self
                .centers
                .iter()
                .map(|c| (f64::from(c[axis]) - mean).powi(2))
                .sum::<f64>()
                / n;
        }
        var /= 2.0;
        let within: f64 = Style::ALL
            .iter()
            .map(|&s| match self.style_radius(s) {
                None => f64::from(self.plain_std).powi(2),
                Some(r) => (f64::from(r).powi(2) + f64::from(self.ring_std).powi(2)) / 2.0,
            })
            .sum::<f64>()
            / Style::ALL.len() as f64;
        (var + within).sqrt() as f32
    }

    /// Per-coordinate bound comfortably containing every style's support.
    pub fn clip_bound(&self) -> f32 {
        let reach = self
            .centers
            .iter()
            .flat_map(|c| [c[0].abs(), c[1].abs()])
            .fold(0.0f32, f32::max);
        reach + 3.0 * self.ring_radius
    }

    pub fn n_objects(&self) -> usize {
        self.centers.len()
    }

    pub fn center(&self, object_id: usize) -> Result<[f32; 2]> {
        self.centers
            .get(object_id)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("object id {object_id} out of range")))
    }

    /// Radius of the circle drawn by `style`, if any.
    pub fn style_radius(&self, style: Style) -> Option<f32> {
        style.radius_multiple().map(|m| m * self.ring_radius)
    }

    /// One draw from the true conditional distribution.
    pub fn sample(&self, cond: Condition, rng: &mut Rng) -> Result<[f32; 2]> {
        let c = self.center(cond.object_id)?;
        Ok(match self.style_radius(cond.style) {
            None => [
                c[0] + self.plain_std * rng.normal(),
                c[1] + self.plain_std * rng.normal(),
            ],
            Some(radius) => {
                let theta = std::f32::consts::TAU * rng.uniform();
                let r = radius + self.ring_std * rng.normal();
                [c[0] + r * theta.cos(), c[1] + r * theta.sin()]
            }
        })
    }

    pub fn sample_many(&self, cond: Condition, n: usize, rng: &mut Rng) -> Result<Vec<[f32; 2]>> {
        (0..n).map(|_| self.sample(cond, rng)).collect()
    }
}
