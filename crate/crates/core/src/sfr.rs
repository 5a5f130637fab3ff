//! Spike-firing-rate maps over the token grid.

use crate::error::{contract, Result};
use crate::model::{Model, Probe};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean spike probability per token, laid out on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SfrMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `[height, width]`, every value in `[0, 1]`.
    pub grid: Vec<f64>,
}

impl SfrMap {
    pub fn from_rates(rates: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if rates.len() != height * width {
            return Err(contract(format!("{} token rates do not fill a {height}x{width} grid", rates.len())));
        }
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(contract("firing rates must lie in [0, 1]"));
        }
        Ok(Self { height, width, grid: rates })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.width + col]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.grid.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Plain-text greymap, one grid cell per pixel, `round(255 * rate)`.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.grid.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| ((v * 255.0).round() as u8).to_string()).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Firing-rate map of one image `[c, h, w]` (or `[1, c, h, w]`), averaged
/// over every spiking neuron inside the encoder blocks, all timesteps and
/// all feature channels of each token.
pub fn sfr_map<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<SfrMap> {
    let cfg = &model.config;
    let shape = match image.shape().len() {
        3 => [1, image.shape()[0], image.shape()[1], image.shape()[2]],
        4 if image.shape()[0] == 1 => [1, image.shape()[1], image.shape()[2], image.shape()[3]],
        _ => return Err(contract(format!("expected a single image, got shape {:?}", image.shape()))),
    };
    let x = image.clone().reshape(&shape)?;
    let mut probe = Probe::new();
    model.predict(&x, Some(&mut probe))?;
    let (h, w) = cfg.grid();
    let rates = probe.token_rates();
    // Guard against float drift above 1 in the mean.
    SfrMap::from_rates(rates.into_iter().map(|r| r.clamp(0.0, 1.0)).collect(), h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let m = SfrMap::from_rates(vec![0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        assert_eq!(m.to_pgm(), "P2\n2 2\n255\n0 128\n255 64\n");
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(SfrMap::from_rates(vec![1.5], 1, 1).is_err());
        assert!(SfrMap::from_rates(vec![0.5], 1, 2).is_err());
    }
}
