//! Accuracy matrix over a task sequence and the ACC/BWT summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `R[i][j]`: test accuracy (a fraction) on task `i` after training task `j`.
/// Only `j >= i` is ever filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    tasks: usize,
    entries: Vec<Option<f64>>,
}

impl ResultMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            entries: vec![None; tasks * tasks],
        }
    }

    /// Builds a matrix from rows; `None` marks unfilled entries.
    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let mut r = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(Error::shape(
                    "ResultMatrix",
                    format!("row {i} has {} entries, want {}", row.len(), rows.len()),
                ));
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    r.set(i, j, *v)?;
                }
            }
        }
        Ok(r)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i < self.tasks && j < self.tasks {
            self.entries[i * self.tasks + j]
        } else {
            None
        }
    }

    pub fn set(&mut self, i: usize, j: usize, accuracy: f64) -> Result<()> {
        if i >= self.tasks || j >= self.tasks {
            return Err(Error::shape(
                "ResultMatrix",
                format!("({i}, {j}) outside {0}x{0}", self.tasks),
            ));
        }
        if j < i {
            return Err(Error::Invalid(format!(
                "R[{i}][{j}]: task {i} is not trained yet after task {j}"
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Invalid(format!(
                "R[{i}][{j}] = {accuracy} outside [0, 1]"
            )));
        }
        self.entries[i * self.tasks + j] = Some(accuracy);
        Ok(())
    }

    /// Number of leading columns whose entries `0..=j` are all filled.
    pub fn completed(&self) -> usize {
        (0..self.tasks)
            .take_while(|&j| (0..=j).all(|i| self.get(i, j).is_some()))
            .count()
    }

    /// The top-left `k×k` block.
    pub fn prefix(&self, k: usize) -> Self {
        let k = k.min(self.tasks);
        let mut r = Self::new(k);
        for i in 0..k {
            for j in 0..k {
                r.entries[i * k + j] = self.get(i, j);
            }
        }
        r
    }

    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        self.entries
            .chunks(self.tasks.max(1))
            .take(self.tasks)
            .map(<[_]>::to_vec)
            .collect()
    }

    fn need(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| Error::Invalid(format!("R[{i}][{j}] is unfilled")))
    }

    /// Mean accuracy over all tasks after the last one was trained.
    pub fn acc(&self) -> Result<f64> {
        if self.tasks == 0 {
            return Err(Error::Empty("result matrix"));
        }
        let t = self.tasks - 1;
        let mut s = 0.0;
        for i in 0..self.tasks {
            s += self.need(i, t)?;
        }
        Ok(s / self.tasks as f64)
    }

    /// Mean change from just-trained to final accuracy; negative means forgetting.
    pub fn bwt(&self) -> Result<f64> {
        if self.tasks == 0 {
            return Err(Error::Empty("result matrix"));
        }
        let t = self.tasks - 1;
        let mut s = 0.0;
        for i in 0..self.tasks {
            s += self.need(i, t)? - self.need(i, i)?;
        }
        Ok(s / self.tasks as f64)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn hand() -> ResultMatrix {
        ResultMatrix::from_rows(&[vec![Some(0.9), Some(0.8)], vec![None, Some(0.95)]]).unwrap()
    }

    #[test]
    fn hand_case() {
        let r = hand();
        assert!((r.acc().unwrap() - 0.875).abs() < 1e-15);
        assert!((r.bwt().unwrap() + 0.05).abs() < 1e-15);
    }

    #[test]
    fn single_task() {
        let r = ResultMatrix::from_rows(&[vec![Some(0.7)]]).unwrap();
        assert_eq!(r.acc().unwrap(), 0.7);
        assert_eq!(r.bwt().unwrap(), 0.0);
    }

    #[test]
    fn no_forgetting_and_improvement() {
        let r =
            ResultMatrix::from_rows(&[vec![Some(0.9), Some(0.9)], vec![None, Some(0.6)]]).unwrap();
        assert_eq!(r.bwt().unwrap(), 0.0);
        let r =
            ResultMatrix::from_rows(&[vec![Some(0.9), Some(0.95)], vec![None, Some(0.6)]]).unwrap();
        assert!(r.bwt().unwrap() > 0.0);
    }

    #[test]
    fn rejects_bad_entries() {
        let mut r = ResultMatrix::new(2);
        assert!(r.set(1, 0, 0.5).is_err());
        assert!(r.set(0, 0, 1.5).is_err());
        assert!(r.set(0, 2, 0.5).is_err());
        assert!(r.set(0, 0, f64::NAN).is_err());
        r.set(0, 0, 0.5).unwrap();
        assert!(r.acc().is_err());
        assert!(r.bwt().is_err());
        assert_eq!(r.completed(), 1);
        assert_eq!(r.prefix(1).acc().unwrap(), 0.5);
        assert!(ResultMatrix::new(0).acc().is_err());
    }

    #[test]
    fn random_matrices_match_direct_sums() {
        let mut rng = SeededRng::new(5);
        for _ in 0..100 {
            let t = 10;
            let mut raw = vec![vec![0.0; t]; t];
            let mut r = ResultMatrix::new(t);
            for i in 0..t {
                for j in i..t {
                    raw[i][j] = rng.uniform(0.0, 1.0);
                    r.set(i, j, raw[i][j]).unwrap();
                }
            }
            let acc: f64 = (0..t).map(|i| raw[i][t - 1]).sum::<f64>() / t as f64;
            let bwt: f64 = (0..t).map(|i| raw[i][t - 1] - raw[i][i]).sum::<f64>() / t as f64;
            assert_eq!(r.acc().unwrap(), acc);
            assert_eq!(r.bwt().unwrap(), bwt);
            assert_eq!(ResultMatrix::from_rows(&r.rows()).unwrap(), r);
        }
    }
}
