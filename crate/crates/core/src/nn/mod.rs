//! Minimal neural-network building blocks with explicit backward passes.
//!
//! Layers are plain parameter holders. `forward` takes `&self` so trained
//! models can be shared across threads; `backward` recomputes what it needs
//! from the saved layer input and accumulates into a gradient value of the
//! same type as the layer (a zeroed clone).

mod layers;
mod optim;

pub use layers::{
    add_per_channel, silu, silu_backward, sum_per_channel, ConvGeometry, Conv2d, ConvTranspose2d,
    Dense, Embedding,
};
pub use optim::{clip_grad_norm, Adam};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat access to every trainable tensor, in a fixed order.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<&[T]>;

    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// Clone with every parameter set to zero; used as a gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    /// Little-endian dump of all parameters.
    fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_params() * T::WIDTH as usize);
        for t in self.tensors() {
            for &v in t {
                v.write_le(&mut out);
            }
        }
        out
    }

    fn load_blob(&mut self, blob: &[u8]) -> Result<()> {
        let width = T::WIDTH as usize;
        let expected = self.num_params() * width;
        if blob.len() != expected {
            return Err(Error::Format(format!(
                "parameter blob has {} bytes, model needs {expected}",
                blob.len()
            )));
        }
        let mut chunks = blob.chunks_exact(width);
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = T::read_le(chunks.next().expect("length checked"));
            }
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn tensors(&self) -> Vec<&[T]> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

/// Implements [`Parameters`] for a struct whose fields all implement it.
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::nn::Parameters<T> for $ty<T> {
            fn tensors(&self) -> Vec<&[T]> {
                let mut v = Vec::new();
                $( v.extend($crate::nn::Parameters::tensors(&self.$field)); )+
                v
            }

            fn tensors_mut(&mut self) -> Vec<&mut [T]> {
                let mut v = Vec::new();
                $( v.extend($crate::nn::Parameters::tensors_mut(&mut self.$field)); )+
                v
            }
        }
    };
}
pub(crate) use impl_parameters;
