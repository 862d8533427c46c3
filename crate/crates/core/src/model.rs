//! The full set of trainable tensors, addressed by name.
//!
//! One flat namespace covers the scoring head, the contrastive
//! temperature and (for the toy backend) the encoder table. The manifest
//! fixes tensor order for the optimizer and the checkpoint layout.

use crate::ars::ArsParams;
use crate::encoder::ToyEncoderParams;
use crate::losses::Temperature;
use crate::optimizer::ParamTensor;

pub mod names {
    pub const ARS_W_Q: &str = "ars.w_q";
    pub const ARS_W_C: &str = "ars.w_c";
    pub const ARS_W_ATT: &str = "ars.w_att";
    pub const LOG_TAU: &str = "loss.log_tau";
    pub const ENCODER_TABLE: &str = "encoder.table";
}

/// Shape and decay policy of one named tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies. The temperature is excluded.
    pub decayed: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All learnable state of one model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub ars: ArsParams,
    pub temperature: Temperature,
    /// Present only for the trainable toy backend.
    pub encoder: Option<ToyEncoderParams>,
}

impl ModelParams {
    /// Seeded initialization. `encoder_buckets` selects the trainable toy
    /// backend; `None` leaves the encoder frozen/external.
    pub fn init(
        latent_dim: usize,
        input_dim: usize,
        encoder_buckets: Option<usize>,
        tau_init: f64,
        master_seed: u64,
    ) -> Self {
        Self {
            ars: ArsParams::init(latent_dim, input_dim, master_seed),
            temperature: Temperature::from_tau(tau_init),
            encoder: encoder_buckets
                .map(|buckets| ToyEncoderParams::init(buckets, input_dim, master_seed)),
        }
    }

    /// Tensor order used everywhere: optimizer sweeps and checkpoints.
    pub fn manifest(&self) -> Vec<TensorSpec> {
        let (h, d) = (self.ars.latent_dim, self.ars.input_dim);
        let mut specs = vec![
            TensorSpec { name: names::ARS_W_Q, shape: vec![h, d], decayed: true },
            TensorSpec { name: names::ARS_W_C, shape: vec![h, d], decayed: true },
            TensorSpec { name: names::ARS_W_ATT, shape: vec![h], decayed: true },
            TensorSpec { name: names::LOG_TAU, shape: vec![1], decayed: false },
        ];
        if let Some(enc) = &self.encoder {
            specs.push(TensorSpec {
                name: names::ENCODER_TABLE,
                shape: vec![enc.buckets, enc.dim],
                decayed: true,
            });
        }
        specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        match name {
            names::ARS_W_Q => Some(&self.ars.w_q),
            names::ARS_W_C => Some(&self.ars.w_c),
            names::ARS_W_ATT => Some(&self.ars.w_att),
            names::LOG_TAU => Some(std::slice::from_ref(&self.temperature.log_tau)),
            names::ENCODER_TABLE => self.encoder.as_ref().map(|e| e.table.as_slice()),
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        match name {
            names::ARS_W_Q => Some(&mut self.ars.w_q),
            names::ARS_W_C => Some(&mut self.ars.w_c),
            names::ARS_W_ATT => Some(&mut self.ars.w_att),
            names::LOG_TAU => Some(std::slice::from_mut(&mut self.temperature.log_tau)),
            names::ENCODER_TABLE => self.encoder.as_mut().map(|e| e.table.as_mut_slice()),
            _ => None,
        }
    }

    /// Mutable optimizer views over every tensor, in manifest order.
    pub fn param_tensors_mut(&mut self) -> Vec<ParamTensor<'_>> {
        let mut tensors = vec![
            ParamTensor { name: names::ARS_W_Q, values: &mut self.ars.w_q, decayed: true },
            ParamTensor { name: names::ARS_W_C, values: &mut self.ars.w_c, decayed: true },
            ParamTensor { name: names::ARS_W_ATT, values: &mut self.ars.w_att, decayed: true },
            ParamTensor {
                name: names::LOG_TAU,
                values: std::slice::from_mut(&mut self.temperature.log_tau),
                decayed: false,
            },
        ];
        if let Some(enc) = &mut self.encoder {
            tensors.push(ParamTensor {
                name: names::ENCODER_TABLE,
                values: &mut enc.table,
                decayed: true,
            });
        }
        tensors
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.manifest().iter().map(TensorSpec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_matches_tensor_lengths() {
        let params = ModelParams::init(8, 4, Some(32), Temperature::TAU_INIT, 3);
        for spec in params.manifest() {
            assert_eq!(params.tensor(spec.name).unwrap().len(), spec.len(), "{}", spec.name);
        }
        assert_eq!(params.num_params(), 8 * 4 * 2 + 8 + 1 + 32 * 4);
    }

    #[test]
    fn frozen_backend_has_no_table() {
        let params = ModelParams::init(8, 4, None, Temperature::TAU_INIT, 3);
        assert!(params.tensor(names::ENCODER_TABLE).is_none());
        assert_eq!(params.manifest().len(), 4);
    }

    #[test]
    fn temperature_tensor_is_live() {
        let mut params = ModelParams::init(2, 2, None, 0.07, 1);
        params.tensor_mut(names::LOG_TAU).unwrap()[0] = 0.5;
        assert_eq!(params.temperature.log_tau, 0.5);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(4, 4, Some(64), 0.07, 9);
        let b = ModelParams::init(4, 4, Some(64), 0.07, 9);
        assert_eq!(a.ars, b.ars);
        assert_eq!(a.encoder.as_ref().unwrap().table, b.encoder.as_ref().unwrap().table);
    }
}
