//! Closed-form KV-cache and weight memory accounting. All arithmetic is in
//! integer bytes; unit conversion happens only at render time.
//!
//! The published per-token figures use decimal megabytes (1e6 bytes). The
//! 32k-generation column follows the same source's mixed convention:
//! decimal megabytes divided by 1024. Both that figure and a strict binary
//! GiB are exposed.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CacheMode {
    /// Looped model with an append-only cache per loop: memory scales with T.
    PerLoop,
    /// One cache per layer shared across loops: independent of T.
    Shared,
    /// Plain non-looped transformer.
    Standard,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MemorySpec {
    pub n_layers: u64,
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub bytes_per_elem: u64,
    pub loops: u64,
    pub cache_mode: CacheMode,
}

impl MemorySpec {
    pub fn loop_multiplier(&self) -> u64 {
        match self.cache_mode {
            CacheMode::PerLoop => self.loops,
            CacheMode::Shared | CacheMode::Standard => 1,
        }
    }
}

/// Bytes of K+V stored per generated token:
/// `layers * 2 * kv_heads * head_dim * bytes_per_elem * loop_multiplier`.
pub fn kv_bytes_per_token(spec: &MemorySpec) -> u64 {
    spec.n_layers * 2 * spec.n_kv_heads * spec.head_dim * spec.bytes_per_elem
        * spec.loop_multiplier()
}

/// Latent-state bytes per token for the shared-cache design (one d-vector
/// per layer). Reported as a separate optional line item; the cache figures
/// above count K+V only, matching the published table.
pub fn latent_bytes_per_token(spec: &MemorySpec) -> u64 {
    spec.n_layers * spec.n_kv_heads * spec.head_dim * spec.bytes_per_elem
}

/// Weight memory at 2 bytes per parameter (16-bit deployment).
pub fn model_bytes(n_params: u64) -> u64 {
    2 * n_params
}

#[derive(Clone, Debug, Serialize)]
pub struct MemoryReport {
    pub kv_bytes_per_token: u64,
    pub model_bytes: u64,
    pub seq_len: u64,
    pub kv_bytes_at_len: u64,
    pub total_bytes_at_len: u64,
    pub latent_bytes_per_token: u64,
}

impl MemoryReport {
    pub fn kv_mb_per_token(&self) -> f64 {
        self.kv_bytes_per_token as f64 / 1e6
    }

    pub fn model_gb(&self) -> f64 {
        self.model_bytes as f64 / 1e9
    }

    /// Published convention: decimal MB per token times length, divided by
    /// 1024.
    pub fn kv_gib_at_len(&self) -> f64 {
        self.kv_bytes_at_len as f64 / 1e6 / 1024.0
    }

    /// Strict binary gibibytes.
    pub fn kv_binary_gib_at_len(&self) -> f64 {
        self.kv_bytes_at_len as f64 / (1u64 << 30) as f64
    }

    /// Model term in decimal GB plus the KV term in the published mixed
    /// convention. The source table's own totals do not sum consistently
    /// under any single unit; this one is within 1.5% of them.
    pub fn total_gb(&self) -> f64 {
        self.model_gb() + self.kv_gib_at_len()
    }
}

/// Full accounting for generating `seq_len` tokens.
pub fn generation_report(spec: &MemorySpec, n_params: u64, seq_len: u64) -> MemoryReport {
    let per_token = kv_bytes_per_token(spec);
    let kv_at = seq_len * per_token;
    let model = model_bytes(n_params);
    MemoryReport {
        kv_bytes_per_token: per_token,
        model_bytes: model,
        seq_len,
        kv_bytes_at_len: kv_at,
        total_bytes_at_len: model + kv_at,
        latent_bytes_per_token: latent_bytes_per_token(spec),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub spec: MemorySpec,
    pub n_params: u64,
    /// Published reference values for the four table columns.
    pub published: (f64, f64, f64, f64),
}

/// The three profiled models: the shared-cache 1.6B, the per-loop 1.4B it
/// derives from, and a GQA standard transformer of comparable size.
pub fn presets() -> Vec<Preset> {
    vec![
        Preset {
            name: "melt16",
            spec: MemorySpec {
                n_layers: 24,
                n_kv_heads: 16,
                head_dim: 128,
                bytes_per_elem: 2,
                loops: 4,
                cache_mode: CacheMode::Shared,
            },
            n_params: 1_636_000_000,
            published: (0.196608, 3.272, 6.29, 9.49),
        },
        Preset {
            name: "ouro14",
            spec: MemorySpec {
                n_layers: 24,
                n_kv_heads: 16,
                head_dim: 128,
                bytes_per_elem: 2,
                loops: 4,
                cache_mode: CacheMode::PerLoop,
            },
            n_params: 1_434_500_000,
            published: (0.786432, 2.869, 25.17, 27.97),
        },
        Preset {
            name: "qwen17",
            spec: MemorySpec {
                n_layers: 28,
                n_kv_heads: 8,
                head_dim: 128,
                bytes_per_elem: 2,
                loops: 1,
                cache_mode: CacheMode::Standard,
            },
            n_params: 1_721_000_000,
            published: (0.114688, 3.442, 3.67, 7.07),
        },
    ]
}

pub const PROFILE_SEQ_LEN: u64 = 32_768;

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> Preset {
        presets().into_iter().find(|p| p.name == name).unwrap()
    }

    #[test]
    fn per_token_bytes_match_published_values_exactly() {
        assert_eq!(kv_bytes_per_token(&preset("melt16").spec), 196_608);
        assert_eq!(kv_bytes_per_token(&preset("ouro14").spec), 786_432);
        assert_eq!(kv_bytes_per_token(&preset("qwen17").spec), 114_688);
        for p in presets() {
            let mb = generation_report(&p.spec, p.n_params, PROFILE_SEQ_LEN).kv_mb_per_token();
            assert_eq!(mb, p.published.0, "{}", p.name);
        }
    }

    #[test]
    fn per_loop_to_shared_ratio_is_the_loop_count() {
        let shared = kv_bytes_per_token(&preset("melt16").spec);
        let per_loop = kv_bytes_per_token(&preset("ouro14").spec);
        assert_eq!(per_loop, shared * 4);
    }

    #[test]
    fn shared_mode_is_independent_of_loop_count() {
        let mut spec = preset("melt16").spec;
        let base = kv_bytes_per_token(&spec);
        for t in 1..=64 {
            spec.loops = t;
            assert_eq!(kv_bytes_per_token(&spec), base);
        }
    }

    #[test]
    fn generation_columns_match_published_table() {
        for p in presets() {
            let r = generation_report(&p.spec, p.n_params, PROFILE_SEQ_LEN);
            assert!(
                (r.model_gb() - p.published.1).abs() < 5e-4,
                "{} model gb {}",
                p.name,
                r.model_gb()
            );
            assert!(
                (r.kv_gib_at_len() - p.published.2).abs() < 0.01,
                "{} kv32k {}",
                p.name,
                r.kv_gib_at_len()
            );
            let rel = (r.total_gb() - p.published.3).abs() / p.published.3;
            assert!(rel < 0.015, "{} total {} rel {}", p.name, r.total_gb(), rel);
        }
    }

    #[test]
    fn model_bytes_trivials() {
        assert_eq!(model_bytes(0), 0);
        assert_eq!(model_bytes(1_636_000_000), 3_272_000_000);
    }

    #[test]
    fn zero_length_generation_is_model_only() {
        let p = preset("melt16");
        let r = generation_report(&p.spec, p.n_params, 0);
        assert_eq!(r.kv_bytes_at_len, 0);
        assert_eq!(r.total_bytes_at_len, r.model_bytes);
    }
}
