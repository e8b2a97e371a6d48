use dimmpim_core::config::{kv_bytes_per_token, HwTopology, LlmModel, SimConfig};
use dimmpim_core::interconnect::{overlap_audit, plan_pim_phase, record_phase, CriticalComm};
use dimmpim_core::mapping::{placement_stats, KvPlacement};
use dimmpim_core::pim::stream::{simulate_head, Cmd};
use dimmpim_core::pim::{DecodeItem, PimModel};
use dimmpim_core::relayout::{chip_residency_check, inverse_relayout, relayout_burst, BurstBeat, ChipImage, Relayout};
use dimmpim_core::scheduler::{split_decode, DecodeSlot};
use dimmpim_core::timeline::Timeline;
use proptest::prelude::*;

fn pim() -> PimModel {
    PimModel::from_config(&SimConfig::dgx_gpt175b()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn relayout_round_trips(words in prop::collection::vec(any::<u64>(), 2), elem in prop::sample::select(vec![8u32, 16])) {
        let beats: Vec<BurstBeat> = words.iter().enumerate().map(|(i, &w)| BurstBeat::from_words(64, i as u32, &[w])).collect();
        let out = relayout_burst(&beats, elem, 8).unwrap();
        prop_assert_eq!(inverse_relayout(&out, elem, 8).unwrap(), beats.clone());
        let ones: u32 = beats.iter().map(|b| b.count_ones()).sum();
        prop_assert_eq!(out.iter().map(|b| b.count_ones()).sum::<u32>(), ones);
        prop_assert!(chip_residency_check(&ChipImage::relayouted(&beats, 8, elem).unwrap()).is_empty());
    }

    #[test]
    fn kv_bytes_linear(layers in 1u32..200, emb in 1u32..20000, prec in 1u32..8, k in 2u32..5) {
        let mut m = LlmModel::gpt_175b();
        (m.layers, m.embedding, m.precision_bytes) = (layers, emb, prec);
        let base = kv_bytes_per_token(&m);
        prop_assert_eq!(base, 2 * layers as u64 * emb as u64 * prec as u64);
        for f in [0, 1, 2] {
            let mut s = m.clone();
            match f {
                0 => s.layers *= k,
                1 => s.embedding *= k,
                _ => s.precision_bytes *= k,
            }
            prop_assert_eq!(kv_bytes_per_token(&s), k as u64 * base);
        }
    }

    #[test]
    fn head_latency_monotone(n in 1u64..200_000, d in 1u64..4096) {
        let p = pim();
        prop_assert!(p.head_ns(n + d).unwrap() >= p.head_ns(n).unwrap());
    }

    #[test]
    fn split_is_balanced(tokens in prop::collection::vec(1u64..20_000, 0..40)) {
        let slots: Vec<DecodeSlot> = tokens.iter().enumerate().map(|(i, &t)| DecodeSlot { req: i, id: i as u64, tokens: t }).collect();
        let (a, b) = split_decode(&slots);
        prop_assert_eq!(a.len() + b.len(), slots.len());
        let (sa, sb): (u64, u64) = (a.iter().map(|s| s.tokens).sum(), b.iter().map(|s| s.tokens).sum());
        prop_assert!(sa.abs_diff(sb) <= tokens.iter().copied().max().unwrap_or(0));
    }

    #[test]
    fn decode_mha_sums_ranks(tokens in prop::collection::vec(1u64..30_000, 1..24)) {
        let p = pim();
        let batch: Vec<DecodeItem> = tokens.iter().enumerate().map(|(i, &t)| DecodeItem { request: i as u64, tokens: t }).collect();
        let r = p.decode_mha(&batch).unwrap();
        prop_assert_eq!(r.head_kernels, batch.len() as u64 * p.layers as u64 * p.heads as u64);
        let serial: f64 = batch.iter().map(|b| p.head_ns(b.tokens).unwrap()).sum::<f64>() * (p.layers * p.heads) as f64;
        let rank_sum: f64 = r.rank_ns.iter().sum();
        prop_assert!((rank_sum - serial).abs() <= 1e-9 * serial);
        prop_assert!(r.t_d_ns * (p.ranksets * p.channels) as f64 >= serial * (1.0 - 1e-12));
    }
}

#[test]
fn relayout_one_hot_oracle() {
    for elem in [8u32, 16] {
        let r = Relayout::new(elem, 8, 64).unwrap();
        let group = r.group_bits();
        let beats = group / 64;
        for bit in 0..group {
            let mut input: Vec<BurstBeat> = (0..beats).map(|i| BurstBeat::zeros(64, i as u32)).collect();
            input[bit / 64].set_bit(bit % 64, true);
            let out = r.forward(&input).unwrap();
            let hot: Vec<usize> =
                (0..group).filter(|&o| out[o / 64].bit(o % 64)).collect();
            assert_eq!(hot, vec![r.target_of(bit)], "elem {elem} bit {bit}");
            assert_eq!(r.source_of(r.target_of(bit)), bit);
        }
    }
}

/// Replays a head's command stream against the DDR constraints of one
/// logic bank: one open row, ACT→RD ≥ tRCD, RD→RD ≥ tCCD_L, ACT→PRE ≥ tRAS,
/// RD→PRE ≥ tRTP, PRE→ACT ≥ tRP, ACT→ACT ≥ tRC.
fn validate_stream(p: &PimModel, n: u64) {
    let t = simulate_head(p, n);
    let mut open: Option<u32> = None;
    let (mut last_act, mut last_pre, mut last_rd) = (None::<u64>, None::<u64>, None::<u64>);
    let mut prev = 0;
    for c in &t.commands {
        assert!(c.cycle >= prev, "commands out of order");
        prev = c.cycle;
        match c.cmd {
            Cmd::Act => {
                assert!(open.is_none(), "ACT with a row open at {}", c.cycle);
                if let Some(p0) = last_pre {
                    assert!(c.cycle >= p0 + p.rp, "tRP at {}", c.cycle);
                }
                if let Some(a) = last_act {
                    assert!(c.cycle >= a + p.rc, "tRC at {}", c.cycle);
                }
                open = Some(c.row);
                last_act = Some(c.cycle);
            }
            Cmd::Rd => {
                assert_eq!(open, Some(c.row), "RD to a closed row at {}", c.cycle);
                assert!(c.cycle >= last_act.unwrap() + p.rcd, "tRCD at {}", c.cycle);
                if let Some(r) = last_rd {
                    assert!(c.cycle >= r + p.ccdl, "tCCD_L at {}", c.cycle);
                }
                last_rd = Some(c.cycle);
            }
            Cmd::Pre => {
                assert!(open.is_some(), "PRE without an open row");
                assert!(c.cycle >= last_act.unwrap() + p.ras, "tRAS at {}", c.cycle);
                assert!(c.cycle >= last_rd.unwrap_or(0) + p.rtp, "tRTP at {}", c.cycle);
                open = None;
                last_pre = Some(c.cycle);
            }
        }
    }
    assert!(open.is_none(), "row left open");
    let reads = t.commands.iter().filter(|c| c.cmd == Cmd::Rd).count() as u64;
    assert_eq!(reads, p.k_reads(n) + p.v_reads(n));
    assert_eq!(t.done, p.head_cycles(n).unwrap());
}

#[test]
fn pim_command_stream_obeys_timing() {
    let p = pim();
    for n in [1, 15, 16, 17, 100, 512, 1000, 4096, 10_000] {
        validate_stream(&p, n);
    }
}

#[test]
fn decode_latency_grows_linearly() {
    let p = pim();
    let one = |n: u64| p.decode_mha(&[DecodeItem { request: 0, tokens: n }]).unwrap().t_d_ns;
    for l in [1024u64, 4096, 16_384, 65_536] {
        let r = one(2 * l) / one(l);
        assert!((r - 2.0).abs() < 0.05 * 2.0, "L={l}: {r}");
    }
    let mut prev = 0.0;
    for n in (1..20_000).step_by(97) {
        let t = one(n);
        assert!(t >= prev);
        prev = t;
    }
}

#[test]
fn receive_exclusivity_over_random_schedules() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for case in 0..10_000u64 {
        let n = rng.random_range(1..=16usize);
        let busy: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..5e6) }).collect();
        let recv: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..4e7) }).collect();
        let comm = CriticalComm { bytes_down: 1.0, bytes_up: 1.0, down_ns: rng.random_range(0.0..1e5), up_ns: rng.random_range(0.0..1e5) };
        let start = rng.random_range(0.0..1e9);
        let phase = plan_pim_phase(start, comm, &busy, &recv, 25.6e9, rng.random_bool(0.8));
        let mut tl = Timeline::default();
        record_phase(&mut tl, &phase, case, 0);
        let v = overlap_audit(&tl);
        assert!(v.is_empty(), "case {case}: {v:?}");
        let max_busy = busy.iter().copied().fold(0.0, f64::max);
        assert!(phase.end_ns >= start + comm.down_ns + max_busy + comm.up_ns - 1e-6);
        for (s, p) in phase.ranksets.iter().enumerate() {
            let done: f64 = p.compute.iter().map(|(a, b)| b - a).sum();
            assert!((done - busy[s]).abs() <= 1e-6 * busy[s].max(1.0));
        }
    }
}

#[test]
fn mapping_balance_gpt175b() {
    let topo = HwTopology::dgx_a100();
    let m = LlmModel::gpt_175b();
    let mut p = KvPlacement::new(&topo, &m, 4).unwrap();
    for r in 0..8 {
        p.admit(r, 4096).unwrap();
        p.append_tokens(r, 1000 + 37 * r).unwrap();
    }
    let st = placement_stats(&p);
    assert_eq!(m.layers % topo.ranksets(), 0);
    assert_eq!(st.imbalance_bytes, 0);
    let layer_bytes = 8 * 1000 * m.embedding as u64 * m.precision_bytes as u64 * 2;
    let mut odd = m.clone();
    odd.layers = 95;
    let mut q = KvPlacement::new(&topo, &odd, 4).unwrap();
    for r in 0..8 {
        q.admit(r, 4096).unwrap();
        q.append_tokens(r, 1000).unwrap();
    }
    assert!(placement_stats(&q).imbalance_bytes <= layer_bytes);
}
