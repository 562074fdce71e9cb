//! Central finite differences over a [`ParamStore`], used as a gradient oracle.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, TensorBlob};

/// A single scalar coordinate inside a store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coord {
    pub name: String,
    pub index: usize,
}

/// Central-difference derivative of `f` at each requested coordinate.
///
/// The perturbed values are rounded to f32 when written into the store; the
/// divisor uses the actually representable step so rounding does not bias the
/// estimate.
pub fn finite_diff_coords<F>(mut f: F, params: &ParamStore, h: f64, coords: &[Coord]) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::range(format!("perturbation h must be positive, got {h}")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for c in coords {
        let orig = params
            .get(&c.name)
            .ok_or_else(|| Error::contract(format!("missing parameter {:?}", c.name)))?
            .data()
            .get(c.index)
            .copied()
            .ok_or_else(|| Error::range(format!("index {} out of range for {:?}", c.index, c.name)))?;
        let plus = (orig as f64 + h) as f32;
        let minus = (orig as f64 - h) as f32;
        work.get_mut(&c.name).unwrap().data_mut()[c.index] = plus;
        let fp = f(&work)?;
        work.get_mut(&c.name).unwrap().data_mut()[c.index] = minus;
        let fm = f(&work)?;
        work.get_mut(&c.name).unwrap().data_mut()[c.index] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::numeric(format!(
                "objective is non-finite near {:?}[{}]",
                c.name, c.index
            )));
        }
        out.push((fp - fm) / (plus as f64 - minus as f64));
    }
    Ok(out)
}

/// Finite-difference gradient for every coordinate of every trainable entry.
pub fn finite_diff_grad<F>(f: F, params: &ParamStore, h: f64) -> Result<IndexMap<String, TensorBlob>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let coords: Vec<Coord> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(name, e)| {
            (0..e.tensor.len()).map(move |index| Coord {
                name: name.to_owned(),
                index,
            })
        })
        .collect();
    let values = finite_diff_coords(f, params, h, &coords)?;
    let mut out = IndexMap::new();
    let mut it = values.into_iter();
    for (name, e) in params.iter().filter(|(_, e)| e.trainable) {
        let data: Vec<f32> = it.by_ref().take(e.tensor.len()).map(|v| v as f32).collect();
        out.insert(name.to_owned(), TensorBlob::new(e.tensor.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(name: &str, v: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, TensorBlob::new(vec![v.len()], v).unwrap(), true).unwrap();
        s
    }

    fn sum_squares(p: &ParamStore) -> Result<f64> {
        Ok(p.iter().flat_map(|(_, e)| e.tensor.data().iter()).map(|&x| (x as f64).powi(2)).sum())
    }

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(sum_squares, &store("w", vec![3.0]), 1e-3).unwrap();
        assert!((g["w"].data()[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn sum_of_squares_vector() {
        let g = finite_diff_grad(sum_squares, &store("w", vec![1.0, 2.0, 3.0, 4.0]), 1e-3).unwrap();
        for (got, want) in g["w"].data().iter().zip([2.0, 4.0, 6.0, 8.0]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn frozen_entries_are_skipped() {
        let mut s = store("w", vec![1.0]);
        s.insert("f", TensorBlob::zeros(&[3]), false).unwrap();
        let g = finite_diff_grad(sum_squares, &s, 1e-3).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn errors() {
        let s = store("w", vec![1.0]);
        assert!(matches!(finite_diff_grad(sum_squares, &s, 0.0), Err(Error::Range(_))));
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &s, 1e-3),
            Err(Error::Numeric(_))
        ));
    }
}
