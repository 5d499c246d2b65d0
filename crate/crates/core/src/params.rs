//! Flat parameter vectors with named segment layouts.
//!
//! Every merging, interpolation and regularization formula in this crate is
//! expressed over [`ParamVector`]. Binary operations require *identical*
//! layouts (same segment names and shapes, in order); matching element counts
//! alone are not enough.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of segments. Cheap to clone.
#[derive(Clone, Serialize, Deserialize)]
#[serde(from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct Layout(Arc<[Segment]>);

impl From<Vec<Segment>> for Layout {
    fn from(segments: Vec<Segment>) -> Self {
        Layout::new(segments)
    }
}

impl From<Layout> for Vec<Segment> {
    fn from(layout: Layout) -> Self {
        layout.0.to_vec()
    }
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self(segments.into())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(Segment::numel).sum()
    }

    /// Segments paired with their element range in the flat vector.
    pub fn ranges(&self) -> impl Iterator<Item = (&Segment, Range<usize>)> + '_ {
        let mut offset = 0;
        self.0.iter().map(move |seg| {
            let start = offset;
            offset += seg.numel();
            (seg, start..offset)
        })
    }

    pub fn range_of(&self, name: &str) -> Option<Range<usize>> {
        self.ranges()
            .find(|(seg, _)| seg.name == name)
            .map(|(_, r)| r)
    }
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0 == other.0
    }
}

impl Eq for Layout {}

impl fmt::Debug for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.0.iter().map(|s| format!("{}{:?}", s.name, s.shape)))
            .finish()
    }
}

/// Flat array of finite weights plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Compatibility(format!(
                "layout holds {} elements but {} values were given",
                layout.total(),
                values.len()
            )));
        }
        ensure_finite(&values, "ParamVector::new")?;
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_parts(layout: Layout, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), layout.total());
        Self { layout, values }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.range_of(name).map(|r| &self.values[r])
    }

    pub fn is_compatible(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::Compatibility(format!(
                "{:?} vs {:?}",
                self.layout, other.layout
            )))
        }
    }

    /// `self += a * x`, in place.
    pub(crate) fn axpy_assign(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_compatible(x)?;
        for (y, xi) in self.values.iter_mut().zip(&x.values) {
            *y += a * xi;
        }
        ensure_finite(&self.values, "axpy")
    }
}

pub(crate) fn ensure_finite(values: &[f64], op: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn zip_map(
    a: &ParamVector,
    b: &ParamVector,
    op: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<ParamVector> {
    a.check_compatible(b)?;
    let values: Vec<f64> = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
    ensure_finite(&values, op)?;
    Ok(ParamVector::from_parts(a.layout.clone(), values))
}

/// `(1 - alpha) * w1 + alpha * w2`, exact at both endpoints.
pub fn interpolate(w1: &ParamVector, w2: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha = {alpha} is outside [0, 1]")));
    }
    let beta = 1.0 - alpha;
    zip_map(w1, w2, "interpolate", |a, b| beta * a + alpha * b)
}

pub fn sub(w1: &ParamVector, w2: &ParamVector) -> Result<ParamVector> {
    zip_map(w1, w2, "sub", |a, b| a - b)
}

pub fn add(w1: &ParamVector, w2: &ParamVector) -> Result<ParamVector> {
    zip_map(w1, w2, "add", |a, b| a + b)
}

/// `y + a * x`.
pub fn axpy(y: &ParamVector, a: f64, x: &ParamVector) -> Result<ParamVector> {
    zip_map(y, x, "axpy", |yi, xi| yi + a * xi)
}

pub fn scale(w: &ParamVector, c: f64) -> Result<ParamVector> {
    let values: Vec<f64> = w.values.iter().map(|v| c * v).collect();
    ensure_finite(&values, "scale")?;
    Ok(ParamVector::from_parts(w.layout.clone(), values))
}

pub fn dot(w1: &ParamVector, w2: &ParamVector) -> Result<f64> {
    w1.check_compatible(w2)?;
    Ok(w1.values.iter().zip(&w2.values).map(|(a, b)| a * b).sum())
}

pub fn l2_norm_sq(w: &ParamVector) -> f64 {
    w.values.iter().map(|v| v * v).sum()
}

/// `‖w1 - w2‖²` without materializing the difference.
pub fn distance_sq(w1: &ParamVector, w2: &ParamVector) -> Result<f64> {
    w1.check_compatible(w2)?;
    Ok(w1
        .values
        .iter()
        .zip(&w2.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
