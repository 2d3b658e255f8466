use crate::tensor::Tensor;

/// A row-major 2-D array of `ny` rows by `nx` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    ny: usize,
    nx: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(ny: usize, nx: usize) -> Self {
        Self::filled(ny, nx, 0.0)
    }

    pub fn filled(ny: usize, nx: usize, value: f64) -> Self {
        Self {
            ny,
            nx,
            data: vec![value; ny * nx],
        }
    }

    pub fn from_fn(ny: usize, nx: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(ny * nx);
        for j in 0..ny {
            for i in 0..nx {
                data.push(f(j, i));
            }
        }
        Self { ny, nx, data }
    }

    pub fn from_vec(ny: usize, nx: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == ny * nx).then_some(Self { ny, nx, data })
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.data[j * self.nx + i]
    }

    #[inline]
    pub fn set(&mut self, j: usize, i: usize, v: f64) {
        self.data[j * self.nx + i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.ny, self.nx], self.data.clone()).expect("grid extents are positive")
    }

    /// Bilinear sample at fractional index coordinates, clamped to the array.
    #[inline]
    pub fn sample(&self, fy: f64, fx: f64) -> f64 {
        let fy = fy.clamp(0.0, (self.ny - 1) as f64);
        let fx = fx.clamp(0.0, (self.nx - 1) as f64);
        let j0 = fy.floor() as usize;
        let i0 = fx.floor() as usize;
        let j1 = (j0 + 1).min(self.ny - 1);
        let i1 = (i0 + 1).min(self.nx - 1);
        let ty = fy - j0 as f64;
        let tx = fx - i0 as f64;
        let top = self.get(j0, i0) * (1.0 - tx) + self.get(j0, i1) * tx;
        let bottom = self.get(j1, i0) * (1.0 - tx) + self.get(j1, i1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}
