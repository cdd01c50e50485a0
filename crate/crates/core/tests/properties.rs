use compact_rec::codec::{self, compression_ratio, CodeMatrix, CodecConfig, PackedCodes};
use compact_rec::distill::kl_divergence;
use compact_rec::eval::{code_usage_histogram, RankingReport};
use compact_rec::tensor::{kernels, Tape, Tensor};
use compact_rec::ttd::{index_factorize, index_recompose, sttd_gather_row, Cores, TTConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 100, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn stp_with_unit_block_is_matmul(h in 1usize..6, p in 1usize..6, q in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[h, p], -3.0, 3.0, &mut rng);
        let b = Tensor::uniform(&[p, q], -3.0, 3.0, &mut rng);
        let mut stp = vec![0.0; h * q];
        kernels::stp(a.data(), b.data(), h, p, q, 1, &mut stp);
        let mut mm = vec![0.0; h * q];
        kernels::matmul_nn(a.data(), b.data(), h, p, q, &mut mm);
        for (x, y) in stp.iter().zip(&mm) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn stp_matches_kronecker_oracle(h in 1usize..5, p in 1usize..5, q in 1usize..5, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[h, n * p], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(&[p, q], -2.0, 2.0, &mut rng);
        let mut out = vec![0.0; h * n * q];
        kernels::stp(a.data(), b.data(), h, p, q, n, &mut out);
        let am = DMatrix::from_row_slice(h, n * p, a.data());
        let bk = DMatrix::from_row_slice(p, q, b.data()).kronecker(&DMatrix::<f64>::identity(n, n));
        let oracle = am * bk;
        for r in 0..h {
            for c in 0..n * q {
                prop_assert!((out[r * n * q + c] - oracle[(r, c)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn index_factorization_is_a_bijection(dims in prop::collection::vec(1usize..7, 1..5), pick in any::<u64>()) {
        let total: usize = dims.iter().product();
        let i = (pick % total as u64) as usize;
        let digits = index_factorize(i, &dims).unwrap();
        prop_assert!(digits.iter().zip(&dims).all(|(d, n)| d < n));
        prop_assert_eq!(index_recompose(&digits, &dims), i);
        prop_assert!(index_factorize(total, &dims).is_err());
    }

    #[test]
    fn gumbel_softmax_lands_on_the_simplex(rows in 1usize..5, k in 2usize..9, temp in 0.05f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alpha = Tensor::uniform(&[rows, k], 0.0, 1.0, &mut rng);
        for row in alpha.data_mut().chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let noise = codec::gumbel_noise(rows * k, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(alpha);
        let o = codec::gumbel_softmax(&mut tape, a, temp, Some(&noise)).unwrap();
        for row in tape.value(o).data().chunks(k) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative(k in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0) + 1e-9).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (draw(), draw());
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn histogram_rows_partition_the_items(v in 1usize..300, m in 1usize..6, bits in 1u32..7, seed in any::<u64>()) {
        let k = 1usize << bits;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..v * m).map(|_| rng.random_range(0..k as u32)).collect();
        let hist = code_usage_histogram(&CodeMatrix::new(v, m, k, codes).unwrap());
        prop_assert_eq!(hist.len(), m);
        for row in &hist {
            prop_assert_eq!(row.len(), k);
            prop_assert_eq!(row.iter().sum::<u64>(), v as u64);
        }
    }

    #[test]
    fn codec_ratio_is_bounded_by_n_over_m(v in 1u64..100_000, n in 1u64..512, m in 1u64..32, bits in 1u32..10) {
        let r = compression_ratio(v, n, m, 1 << bits).unwrap();
        prop_assert!(r.value() <= n as f64 / m as f64);
        prop_assert!(r.floor() <= r.nearest());
    }

    #[test]
    fn packed_codes_round_trip(v in 1usize..200, m in 1usize..6, bits in 1u32..9, n in 1usize..9, seed in any::<u64>()) {
        let k = 1usize << bits;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..v * m).map(|_| rng.random_range(0..k as u32)).collect();
        let books = Tensor::uniform(&[m * k, n], -1.0, 1.0, &mut rng);
        let packed = PackedCodes::new(CodeMatrix::new(v, m, k, codes).unwrap(), &books).unwrap();
        let bytes = packed.to_bytes();
        let back = PackedCodes::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &packed);
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.reconstruct_all(), packed.reconstruct_all());
    }

    #[test]
    fn ranking_metrics_are_bounded_and_ordered(ranks in prop::collection::vec(1usize..60, 1..80)) {
        let r = RankingReport::from_ranks(&ranks);
        for x in [r.p5, r.p10, r.ndcg5, r.ndcg10] {
            prop_assert!((0.0..=100.0).contains(&x));
        }
        prop_assert!(r.p5 <= r.p10);
        prop_assert!(r.ndcg5 <= r.ndcg10);
        prop_assert!(r.ndcg10 <= r.p10);
    }

    #[test]
    fn sttd_chain_yields_prod_j_values(
        i_dims in prop::collection::vec(1usize..5, 2..4),
        j_half in prop::collection::vec(1usize..3, 2..4),
        r_half in 1usize..4,
        seed in any::<u64>(),
    ) {
        let d = i_dims.len().min(j_half.len());
        let n = 2;
        let cfg = TTConfig {
            i_dims: i_dims[..d].to_vec(),
            j_dims: j_half[..d].iter().map(|j| j * n).collect(),
            rank: r_half * n,
            n,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cores = cfg
            .core_shapes()
            .iter()
            .map(|s| (0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cores = Cores::<f64>::new(cfg.clone(), cores).unwrap();
        let i = rng.random_range(0..cfg.rows());
        prop_assert_eq!(sttd_gather_row(i, &cores).unwrap().len(), cfg.dim());
    }
}

#[test]
fn stp_hand_example() {
    let mut out = [0.0; 2];
    kernels::stp(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 1, 2, 1, 2, &mut out);
    assert_eq!(out, [23.0, 34.0]);
}

#[test]
fn codec_config_rejects_zero_books() {
    assert!(CodecConfig::new(0, 8, 4).validate().is_err());
    assert!(compression_ratio(20_000, 100, 0, 8).is_err());
}
