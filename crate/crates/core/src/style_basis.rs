//! Style basis decoder: maps a style code to `K` motion-space basis vectors.
//!
//! Each basis vector gets its own two-hidden-layer MLP so the vectors are
//! free to specialize independently; sharing a trunk would couple them. The
//! denoiser's alpha head mixes these vectors into the composed prediction.
//! `K = 0` disables the mechanism entirely: `decode` returns `None` and
//! composition falls back to the direct prediction alone.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Graph, Linear, ParamSet};
use crate::scalar::Scalar;

pub struct StyleBasisDecoder {
    mlps: Vec<[Linear; 3]>,
    d_style: usize,
    d_motion: usize,
}

impl StyleBasisDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        k: usize,
        d_style: usize,
        hidden: usize,
        d_motion: usize,
    ) -> Self {
        let mlps = (0..k)
            .map(|i| {
                let name = format!("style_basis.k{i}");
                [
                    Linear::new(ps, rng, &format!("{name}.fc1"), d_style, hidden),
                    Linear::new(ps, rng, &format!("{name}.fc2"), hidden, hidden),
                    Linear::new(ps, rng, &format!("{name}.fc3"), hidden, d_motion),
                ]
            })
            .collect();
        Self {
            mlps,
            d_style,
            d_motion,
        }
    }

    pub fn k(&self) -> usize {
        self.mlps.len()
    }

    /// Decodes a `1 x d_style` code into a `K x d_motion` basis matrix.
    /// Returns `None` when `K = 0`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, s: Var) -> Option<Var> {
        assert_eq!(
            g.tape.shape(s),
            (1, self.d_style),
            "style code must be 1 x d_style"
        );
        let mut rows: Option<Var> = None;
        for mlp in &self.mlps {
            let h = mlp[0].forward(g, s);
            let h = g.tape.gelu(h);
            let h = mlp[1].forward(g, h);
            let h = g.tape.gelu(h);
            let b = mlp[2].forward(g, h);
            rows = Some(match rows {
                None => b,
                Some(acc) => g.tape.concat_rows(acc, b),
            });
        }
        rows
    }

    /// Array-level decoding (inference path).
    pub fn decode_arrays<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        s: &Array2<T>,
    ) -> Result<Option<Array2<T>>> {
        if s.dim() != (1, self.d_style) {
            return Err(crate::Error::shape("style_basis", self.d_style, s.ncols()));
        }
        if self.mlps.is_empty() {
            return Ok(None);
        }
        let mut g = Graph::new(params);
        let sv = g.constant(s.clone());
        let b = self.decode(&mut g, sv).expect("K > 0 checked above");
        Ok(Some(g.tape.value(b).clone()))
    }

    pub fn d_motion(&self) -> usize {
        self.d_motion
    }
}
