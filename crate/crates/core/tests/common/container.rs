//! Weight-container integrity checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tearflow::io::{decode_weights, encode_weights};
use tearflow::model::{TfNet, TfNetConfig};
use tearflow::params::Parameterized;
use tearflow::Error;

#[derive(Debug, Default)]
pub struct ContainerCheck {
    pub models: usize,
    pub round_trip_failures: usize,
    pub corruptions: usize,
    pub undetected: usize,
    pub not_checksum: usize,
}

impl ContainerCheck {
    pub fn passed(&self) -> bool {
        self.models > 0 && self.corruptions > 0 && self.round_trip_failures == 0 && self.undetected == 0 && self.not_checksum == 0
    }
}

/// Every parameter as `(name, shape, bit patterns)`.
pub fn param_bits(net: &TfNet<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    net.params()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Offset of the payload: magic, length word, header, padding to 16 bytes.
pub fn payload_start(bytes: &[u8]) -> usize {
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    (8 + header_len).div_ceil(16) * 16
}

/// Round-trip a train-form and a fused micro network, then flip single bytes
/// of the payload and checksum (`flips` positions each) and of the padding.
pub fn container_check(seed: u64, flips: usize) -> ContainerCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = TfNetConfig::with_widths([8, 8, 16, 16, 32]);
    cfg.num_branches = 2;
    let mut net = TfNet::<f32>::build(cfg, seed).unwrap();
    net.randomize_norms(&mut rng);
    let fused = net.fuse().unwrap();
    let mut out = ContainerCheck::default();
    for model in [&net, &fused] {
        out.models += 1;
        let bytes = encode_weights(model).unwrap();
        let ok = match decode_weights(&bytes) {
            Ok(back) => {
                back.is_fused() == model.is_fused()
                    && back.config() == model.config()
                    && param_bits(&back) == param_bits(model)
                    && encode_weights(&back).unwrap() == bytes
            }
            Err(_) => false,
        };
        out.round_trip_failures += !ok as usize;

        let start = payload_start(&bytes);
        let header_end = 8 + u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut positions: Vec<usize> = (0..flips).map(|_| rng.gen_range(start..bytes.len())).collect();
        positions.extend(bytes.len() - 4..bytes.len());
        positions.extend(header_end..start);
        for pos in positions {
            let mut bad = bytes.clone();
            bad[pos] ^= 1 << rng.gen_range(0..8);
            out.corruptions += 1;
            match decode_weights(&bad) {
                Ok(_) => out.undetected += 1,
                Err(Error::Checksum { .. }) => {}
                Err(_) if pos < start => {}
                Err(_) => out.not_checksum += 1,
            }
        }
    }
    out
}
