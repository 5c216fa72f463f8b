//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use magnet_core::autoloop::{run_autoresearch, AutoloopParams, ConvergenceParams, ScriptedLab, StopReason};
use magnet_core::diloco::{outer_update, ContributionWeight, OuterConfig, OuterOptimizerState, PseudoGradient};
use magnet_core::erasure::{rs_decode, rs_encode, CodingParams, Gf256};
use magnet_core::identity::{
    derive_node_id, recover_pubkey, request_digest, sign_request, verify_request, AuthMode, NodeIdentity,
    RejectReason, SignedRequest, Verdict,
};
use magnet_core::ledger::{
    commitment, ic_check, sybil_total, CommitStatus, Ledger, LedgerConfig, LedgerError, Offense,
};
use magnet_core::quantcore::{quantize_activations, quantize_weights, Params};
use magnet_core::rounds::model_check_round;
use magnet_core::scenario::{run_autoloop, run_diloco, run_ledger, run_storage, RunReport, Scenario};
use magnet_core::storagemon::{provision_check, NodeRecord, StorageConfig, StorageMonitor};
use magnet_core::tier::Tier;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    if elapsed > Duration::from_secs(limit_secs) {
        Err(format!("took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64()))
    } else {
        Ok(())
    }
}

fn ratio(n: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

fn scenario_file(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::from_path(&path).expect("bundled scenario parses")
}

// 1
fn rs_completeness() -> Check {
    let start = Instant::now();
    let params = CodingParams::new(4, 2).map_err(|e| e.to_string())?;
    let mut r = rng(1);
    let mut blob = vec![0u8; 1 << 20];
    r.fill(&mut blob[..]);
    let shards = rs_encode(&blob, params).map_err(|e| e.to_string())?;
    for a in 0..6 {
        for b in a + 1..6 {
            let keep: Vec<_> = shards.iter().filter(|s| s.index != a && s.index != b).cloned().collect();
            ensure!(rs_decode(&keep).ok().as_ref() == Some(&blob), "lost shards {a},{b} not recovered");
        }
    }
    for case in 0..1000 {
        let len = (1024.0 * 1024f64.powf(r.gen::<f64>())) as usize;
        let len = len.clamp(1024, 1 << 20);
        let mut data = vec![0u8; len];
        r.fill(&mut data[..]);
        let shards = rs_encode(&data, params).map_err(|e| e.to_string())?;
        let lost = r.gen_range(0..=2);
        let mut idx: Vec<usize> = (0..6).collect();
        for i in 0..lost {
            let j = r.gen_range(i..6);
            idx.swap(i, j);
        }
        let dropped: BTreeSet<usize> = idx[..lost].iter().copied().collect();
        let mut keep: Vec<_> = shards.iter().filter(|s| !dropped.contains(&s.index)).cloned().collect();
        let n = keep.len();
        for i in 0..n {
            let j = r.gen_range(i..n);
            keep.swap(i, j);
        }
        ensure!(rs_decode(&keep).ok() == Some(data), "case {case}: {len} bytes, lost {dropped:?}");
    }
    within(start.elapsed(), 10)?;
    Ok(format!("15 pairs + 1000 random patterns bit-exact in {:.2}s", start.elapsed().as_secs_f64()))
}

/// Shift-and-add multiplication modulo x^8 + x^4 + x^3 + x^2 + 1.
fn gf_mul_oracle(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0u8;
    while b != 0 {
        if b & 1 == 1 {
            p ^= a;
        }
        let carry = a & 0x80 != 0;
        a <<= 1;
        if carry {
            a ^= 0x1d;
        }
        b >>= 1;
    }
    p
}

// 2
fn gf_soundness() -> Check {
    let start = Instant::now();
    for a in 0..=255u8 {
        for b in 0..=255u8 {
            ensure!((Gf256(a) * Gf256(b)).0 == gf_mul_oracle(a, b), "{a}*{b} disagrees with reference");
        }
    }
    ensure!(Gf256(0).inv().is_none(), "zero has an inverse");
    for a in 1..=255u8 {
        let inv = Gf256(a).inv().ok_or(format!("{a} has no inverse"))?;
        ensure!(gf_mul_oracle(a, inv.0) == 1, "{a} * inv({a}) != 1");
    }
    let mut r = rng(2);
    for _ in 0..100_000 {
        let (a, b, c) = (Gf256(r.gen()), Gf256(r.gen()), Gf256(r.gen()));
        ensure!(a * (b + c) == a * b + a * c, "distributivity fails for {a:?} {b:?} {c:?}");
    }
    within(start.elapsed(), 5)?;
    Ok(format!("255 inverses, 1e5 distributive triples in {:.2}s", start.elapsed().as_secs_f64()))
}

// 3
fn fedavg_reduction() -> Check {
    let mut r = rng(3);
    let mut worst = 0f64;
    for case in 0..100 {
        let len = r.gen_range(1..64);
        let nodes = r.gen_range(1..8);
        let base: Vec<f64> = (0..len).map(|_| r.gen_range(-2.0..2.0)).collect();
        let locals: Vec<Vec<f64>> = (0..nodes)
            .map(|_| (0..len).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let uniform = case % 2 == 0;
        let raw: Vec<f64> = (0..nodes).map(|_| if uniform { 1.0 } else { r.gen_range(0.1..5.0) }).collect();
        let total: f64 = raw.iter().sum();
        let grads: Vec<PseudoGradient<f64>> = locals
            .iter()
            .enumerate()
            .map(|(i, l)| PseudoGradient {
                delta: Params::new(base.iter().zip(l).map(|(b, x)| b - x).collect()),
                node: format!("n{i}"),
                inner_steps: 1,
                staleness: 0,
                local_loss: 0.0,
            })
            .collect();
        let weights: Vec<ContributionWeight> = raw
            .iter()
            .enumerate()
            .map(|(i, w)| ContributionWeight {
                node: format!("n{i}"),
                weight: *w,
            })
            .collect();
        let state = OuterOptimizerState::new(len, OuterConfig { lr: 1.0, momentum: 0.0 });
        let (next, _) =
            outer_update(&Params::new(base.clone()), &grads, &weights, &state).map_err(|e| e.to_string())?;
        for j in 0..len {
            let avg: f64 = locals.iter().zip(&raw).map(|(l, w)| l[j] * w / total).sum();
            worst = worst.max((next.as_slice()[j] - avg).abs());
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e} > 1e-12");
    Ok(format!("100 cases, max deviation {worst:.1e} <= 1e-12"))
}

// 4
fn diloco_convergence() -> Check {
    let start = Instant::now();
    let s = scenario_file("diloco.toml");
    let cfg = s.diloco.as_ref().ok_or("scenario lacks [diloco]")?;
    ensure!(cfg.nodes == 4 && cfg.inner_steps == 20 && cfg.rounds == 30, "scenario shape changed");
    let report = run_diloco(&s).map_err(|e| e.to_string())?;
    ensure!(report.ok(), "violations: {:?}", report.violations);
    let sum = &report.summary;
    ensure!(sum["rounds_completed"] == 30, "completed {}", sum["rounds_completed"]);
    let dist = sum["distributed_final_loss"].as_f64().ok_or("no distributed loss")?;
    let central = sum["centralized_final_loss"].as_f64().ok_or("no centralized loss")?;
    let rel = dist / central;
    ensure!(rel <= 1.10, "distributed/centralized = {rel:.4} > 1.10");
    within(start.elapsed(), 60)?;
    Ok(format!("loss ratio {rel:.4} <= 1.10 ({dist:.5} vs {central:.5}) in {:.2}s", start.elapsed().as_secs_f64()))
}

// 5
fn round_safety() -> Check {
    let start = Instant::now();
    let r = model_check_round();
    ensure!(r.passed(), "violations: {:?}", r.violations);
    ensure!(r.merges_observed > 0 && r.fast_peer_cases > 0, "model check explored no merges or fast peers");
    within(start.elapsed(), 120)?;
    Ok(format!(
        "{} messages, {} interleavings, {} states, {} fast-peer cases in {:.2}s",
        r.messages,
        r.interleavings,
        r.distinct_states,
        r.fast_peer_cases,
        start.elapsed().as_secs_f64()
    ))
}

// 6
fn ledger_conservation() -> Check {
    let mut r = rng(6);
    let pool = 1000u64;
    let mut ledger = Ledger::new(LedgerConfig {
        epoch_pool: pool,
        ..LedgerConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let nodes: Vec<String> = (0..7).map(|i| format!("node-{i}")).collect();
    let mult: BTreeMap<String, BigRational> = nodes
        .iter()
        .map(|n| (n.clone(), BigRational::new(BigInt::from(r.gen_range(1..40)), BigInt::from(10))))
        .collect();
    let mut carry = 0u64;
    let mut paid = 0u64;
    for epoch in 0..1000u64 {
        let mut weights = BTreeMap::new();
        if r.gen::<f64>() > 0.05 {
            for n in &nodes {
                if r.gen::<f64>() < 0.6 {
                    let c = BigRational::new(BigInt::from(r.gen_range(0..500)), BigInt::from(r.gen_range(1..9)));
                    ledger.record_contribution(epoch, n, c.clone()).map_err(|e| e.to_string())?;
                    *weights.entry(n.clone()).or_insert_with(BigRational::zero) += &mult[n] * c;
                }
            }
        }
        let rewards = ledger.settle_epoch(epoch, &mult).map_err(|e| e.to_string())?;
        let due = pool + carry;
        let total: BigRational = weights.values().cloned().sum();
        if total.is_zero() {
            ensure!(rewards.is_empty() && ledger.carry() == due, "epoch {epoch}: zero weight not carried");
            carry = due;
        } else {
            let sum: u64 = rewards.values().sum();
            ensure!(sum == due, "epoch {epoch}: paid {sum} != pool {due}");
            let mut exact_sum = BigRational::zero();
            for (n, w) in &weights {
                let exact = ratio(due) * w / &total;
                let got = ratio(rewards.get(n).copied().unwrap_or(0));
                ensure!((&got - &exact).abs() < ratio(1), "epoch {epoch}: {n} got {got}, exact {exact}");
                exact_sum += exact;
            }
            ensure!(exact_sum == ratio(due), "epoch {epoch}: exact shares do not sum to the pool");
            carry = 0;
            paid += sum;
        }
        ensure!(
            matches!(ledger.settle_epoch(epoch, &mult), Err(LedgerError::AlreadySettled(_))),
            "epoch {epoch} settled twice"
        );
        ensure!(
            ledger.record_contribution(epoch, &nodes[0], ratio(1)).is_err(),
            "contribution accepted after settlement"
        );
    }
    ensure!(paid + carry == 1000 * pool, "emitted {paid} + carry {carry} != {}", 1000 * pool);
    let cap = ledger.config().cap();
    ensure!(ledger.emitted_by_day().values().all(|d| *d <= cap), "daily cap exceeded");

    let tight = Scenario::from_toml_str(
        "seed = 6\n[economics.ledger]\nepoch_pool = 1000\ndaily_cap = 120000\n[ledger]\nepochs = 1000\n",
    )
    .map_err(|e| e.to_string())?;
    let report = run_ledger(&tight).map_err(|e| e.to_string())?;
    ensure!(report.ok(), "scenario violations: {:?}", report.violations);
    ensure!(report.summary["chain_verified"] == true, "log chain broken");
    let days = report.summary["emitted_by_day"].as_object().ok_or("no emission table")?;
    ensure!(days.values().all(|v| v.as_u64().unwrap_or(u64::MAX) <= 120_000), "scenario exceeded cap");
    Ok(format!(
        "1000 epochs conserve {} units exactly; cap-bound scenario left {} epochs pending",
        paid + carry,
        report.summary["pending_epochs"]
    ))
}

// 7
fn sybil_invariance() -> Check {
    let mut r = rng(7);
    let mut worst = 0u64;
    for k in [2usize, 4, 8] {
        for _ in 0..50 {
            let tier = BigRational::new(BigInt::from(r.gen_range(1..30)), BigInt::from(10));
            let parts: Vec<BigRational> = (0..k)
                .map(|_| BigRational::new(BigInt::from(r.gen_range(0..300)), BigInt::from(r.gen_range(1..7))))
                .collect();
            let contribution: BigRational = parts.iter().cloned().sum();
            let others: Vec<(String, BigRational, BigRational)> = (0..r.gen_range(1..6))
                .map(|i| {
                    (
                        format!("o{i}"),
                        BigRational::new(BigInt::from(r.gen_range(1..30)), BigInt::from(10)),
                        ratio(r.gen_range(1..400)),
                    )
                })
                .collect();
            let pool = r.gen_range(100..100_000);
            let rep = sybil_total(pool, &tier, &contribution, &parts, &others, 1000).map_err(|e| e.to_string())?;
            ensure!(rep.split_exact == rep.unsplit_exact, "k={k}: exact totals differ");
            let diff = rep.unit_difference();
            ensure!(diff < k as u64, "k={k}: rounded totals differ by {diff} units");
            worst = worst.max(diff);
        }
    }
    Ok(format!("k in {{2,4,8}}: exact totals equal, max rounded gap {worst} < k"))
}

// 8
fn commit_reveal() -> Check {
    let mut r = rng(8);
    for case in 0..200u64 {
        let rate = f64::from(r.gen_range(100..=1000u32)) / 1000.0;
        let mut cfg = LedgerConfig::default();
        cfg.slash.mismatched_reveal = rate;
        let window = cfg.commit_window_secs;
        let mut ledger = Ledger::new(cfg).map_err(|e| e.to_string())?;
        let bond = r.gen_range(1..1_000_000u64);
        for n in ["honest", "cheat"] {
            ledger.post_bond(n, bond);
        }
        let mut result = vec![0u8; r.gen_range(1..64)];
        r.fill(&mut result[..]);
        let nonce: [u8; 32] = r.gen();
        let t0 = 1_000 * case;
        ledger.open_commit_round(case, t0).map_err(|e| e.to_string())?;
        let digest = commitment(&result, &nonce);
        let mut h = Sha256::new();
        h.update(&result);
        h.update(nonce);
        ensure!(digest[..] == h.finalize()[..], "commitment is not SHA-256(result || nonce)");
        ensure!(
            result.len() < 4 || !digest.windows(result.len()).any(|w| w == &result[..]),
            "commitment exposes result bytes"
        );
        ensure!(commitment(&result, &[0u8; 32]) != digest || nonce == [0u8; 32], "nonce does not blind");
        for n in ["honest", "cheat"] {
            ledger.commit(case, n, digest, t0 + 1).map_err(|e| e.to_string())?;
        }
        let before = ledger.state_dump();
        ensure!(
            matches!(
                ledger.reveal(case, "honest", &result, &nonce, t0 + window - 1),
                Err(LedgerError::RevealBeforeClose { .. })
            ),
            "early reveal not rejected"
        );
        ensure!(ledger.state_dump() == before, "early reveal changed state");
        let ok = ledger.reveal(case, "honest", &result, &nonce, t0 + window).map_err(|e| e.to_string())?;
        ensure!(ok == CommitStatus::RevealedOk, "matching reveal not accepted");
        ensure!(ledger.bond("honest") == Some(bond), "honest node lost bond");
        let mut other = result.clone();
        other[0] ^= 1;
        let bad = ledger.reveal(case, "cheat", &other, &nonce, t0 + window).map_err(|e| e.to_string())?;
        ensure!(bad == CommitStatus::Slashed, "mismatched reveal not slashed");
        let thousandths = (rate * 1000.0).round() as u64;
        let expected = thousandths * bond / 1000;
        ensure!(
            ledger.bond("cheat") == Some(bond - expected),
            "slash of {bond} at {rate}: bond {:?}, expected {}",
            ledger.bond("cheat"),
            bond - expected
        );
        let ev = ledger.slashes().last().ok_or("no slash event")?;
        ensure!(ev.reason == Offense::MismatchedReveal && ev.amount == expected, "slash event wrong");
    }
    Ok("200 rounds: matching accepted, mismatched slashed at floor(s*B), early reveal inert, commitment hides result".into())
}

// 9
fn ic_calculator() -> Check {
    let out = ic_check(100.0, 1.0, 0.9, 10.0, 0.0).map_err(|e| e.to_string())?;
    ensure!((out.cost_of_attack - 190.0).abs() < 1e-9, "threshold {} != 190", out.cost_of_attack);
    ensure!(ic_check(100.0, 1.0, 0.9, 10.0, 189.999).map_err(|e| e.to_string())?.holds, "189.999 should be deterred");
    ensure!(!ic_check(100.0, 1.0, 0.9, 10.0, 190.001).map_err(|e| e.to_string())?.holds, "190.001 should not be");
    let mut r = rng(9);
    for _ in 0..10_000 {
        let b = r.gen_range(0.0..1e4);
        let s = r.gen_range(0.1..=1.0);
        let g = r.gen_range(0.01..0.99);
        let rw = r.gen_range(0.0..1e3);
        let base = ic_check(b, s, g, rw, 0.0).map_err(|e| e.to_string())?.cost_of_attack;
        let more_r = ic_check(b, s, g, rw + r.gen_range(0.0..100.0), 0.0).map_err(|e| e.to_string())?;
        let more_b = ic_check(b + r.gen_range(0.0..100.0), s, g, rw, 0.0).map_err(|e| e.to_string())?;
        ensure!(more_r.cost_of_attack >= base && more_b.cost_of_attack >= base, "not monotone at B={b} R={rw}");
        let series: f64 = (1..5000).map(|t| g.powi(t) * rw).sum();
        ensure!(((s * b + series) - base).abs() <= 1e-6 * base.max(1.0), "closed form disagrees with series");
    }
    Ok("threshold 190 at (s=1, B=100, gamma=0.9, R=10); monotone in R and B over 1e4 draws".into())
}

#[derive(serde::Deserialize)]
struct Vector {
    secret: String,
    pubkey: String,
    node_id: String,
    timestamp: u64,
    digest: String,
    wallet_signature: String,
    cluster_mac: String,
}

#[derive(serde::Deserialize)]
struct Vectors {
    cluster_secret: String,
    vectors: Vec<Vector>,
}

// 10
fn identity() -> Check {
    let doc: Vectors =
        serde_json::from_str(include_str!("data/identity_vectors.json")).map_err(|e| e.to_string())?;
    let secret = hex::decode(&doc.cluster_secret).map_err(|e| e.to_string())?;
    let unhex = |s: &str| hex::decode(s).map_err(|e| e.to_string());
    for v in &doc.vectors {
        let key: [u8; 32] = unhex(&v.secret)?.try_into().map_err(|_| "secret length")?;
        let id = NodeIdentity::from_secret_bytes(&key).map_err(|e| e.to_string())?;
        ensure!(hex::encode(id.pubkey()) == v.pubkey, "pubkey mismatch for {}", v.node_id);
        ensure!(id.node_id() == v.node_id, "node id mismatch {}", v.node_id);
        ensure!(derive_node_id(&unhex(&v.pubkey)?).map_err(|e| e.to_string())? == v.node_id, "derived id");
        ensure!(hex::encode(request_digest(&v.node_id, v.timestamp)) == v.digest, "digest mismatch");
        let wallet = SignedRequest {
            node_id: v.node_id.clone(),
            timestamp: v.timestamp,
            mode: AuthMode::Wallet,
            signature: unhex(&v.wallet_signature)?,
        };
        ensure!(
            recover_pubkey(&wallet).map_err(|e| e.to_string())?.map(hex::encode) == Some(v.pubkey.clone()),
            "recovered key mismatch"
        );
        let ours = sign_request(&id, v.timestamp, AuthMode::Wallet, None).map_err(|e| e.to_string())?;
        ensure!(hex::encode(&ours.signature) == v.wallet_signature, "wallet signature bytes differ");
        let mac = sign_request(&id, v.timestamp, AuthMode::ClusterHmac, Some(&secret)).map_err(|e| e.to_string())?;
        ensure!(hex::encode(&mac.signature) == v.cluster_mac, "cluster mac differs");
        for req in [&wallet, &mac] {
            let at = |now: u64| verify_request(req, now, Some(&secret)).map_err(|e| e.to_string());
            ensure!(at(v.timestamp)? == Verdict::Accept, "golden request rejected");
            ensure!(at(v.timestamp + 300)? == Verdict::Accept, "rejected at +300 s");
            ensure!(at(v.timestamp - 300)? == Verdict::Accept, "rejected at -300 s");
            ensure!(at(v.timestamp + 301)? == Verdict::Reject(RejectReason::Stale), "accepted at +301 s");
            ensure!(at(v.timestamp - 301)? == Verdict::Reject(RejectReason::Stale), "accepted at -301 s");
        }
    }
    let mut r = rng(10);
    let ts = 1_700_000_000;
    for i in 0..10_000 {
        let a = NodeIdentity::generate(&mut r);
        let b = NodeIdentity::generate(&mut r);
        let forged = a.sign_as(b.node_id(), ts);
        let verdict = verify_request(&forged, ts, None).map_err(|e| e.to_string())?;
        ensure!(verdict == Verdict::Reject(RejectReason::Binding), "pair {i}: forged binding gave {verdict:?}");
    }
    Ok(format!("{} golden vectors in both modes, 300 s boundary, 1e4 forged bindings rejected", doc.vectors.len()))
}

// 11
fn storage_daemon() -> Check {
    let mut lines = Vec::new();
    for seed in [7u64, 8, 9] {
        let mut s = scenario_file("storage.toml");
        s.seed = seed;
        let report = run_storage(&s).map_err(|e| e.to_string())?;
        ensure!(report.ok(), "seed {seed}: violations {:?}", report.violations);
        let sum = &report.summary;
        ensure!(sum["all_decodable"] == true, "seed {seed}: blob lost");
        let (lo, hi) = (sum["final_min_replicas"].as_u64(), sum["final_max_replicas"].as_u64());
        ensure!(
            matches!((lo, hi), (Some(l), Some(h)) if l >= 3 && h <= 5),
            "seed {seed}: replicas {lo:?}..{hi:?} outside [3,5]"
        );
        lines.push(format!("{}-{}", lo.unwrap_or(0), hi.unwrap_or(0)));
    }

    let config = StorageConfig::default();
    let mut mon = StorageMonitor::new(config.clone()).map_err(|e| e.to_string())?;
    let node = |id: &str, read: f64, write: f64| NodeRecord {
        id: id.into(),
        tier: Tier::StorageNode,
        read_mbps: read,
        write_mbps: write,
        last_heartbeat: 0,
        region: "r".into(),
        bond: 0,
    };
    mon.register(node("a", 200.0, 100.0)).map_err(|e| e.to_string())?;
    mon.heartbeat("a", 1000).map_err(|e| e.to_string())?;
    ensure!(mon.is_live("a", 1120), "stale at exactly 120 s");
    ensure!(!mon.is_live("a", 1121), "live at 121 s");

    let cases = [
        (100.0, 50.0, Tier::StorageNode),
        (99.9, 50.0, Tier::MobileLight),
        (100.0, 49.9, Tier::MobileLight),
        (500.0, 500.0, Tier::StorageNode),
    ];
    for (read, write, want) in cases {
        let got = provision_check(&node("p", read, write), &config);
        ensure!(got == want, "{read}/{write} MB/s provisioned as {got}, expected {want}");
    }
    Ok(format!("3 failure runs decodable with replicas {}; stale strictly after 120 s; 100/50 MB/s demotion", lines.join(",")))
}

// 12
fn quantization() -> Check {
    let mut r = rng(12);
    let mut worst = 0f64;
    for i in 0..100_000 {
        let len = r.gen_range(1..48);
        let spread = 10f64.powf(r.gen_range(-3.0..3.0));
        let w: Vec<f64> = (0..len).map(|_| r.gen_range(-spread..spread)).collect();
        let t = quantize_weights(&Params::new(w.clone()));
        ensure!(t.values.iter().all(|v| (-1..=1).contains(v)), "tensor {i}: code outside ternary set");
        let exact: BigRational = w
            .iter()
            .map(|x| BigRational::from_float(x.abs()).expect("finite"))
            .sum::<BigRational>()
            / ratio(len as u64);
        let alpha = exact.to_f64().unwrap_or(f64::NAN);
        let rel = ((t.scale - alpha) / alpha).abs();
        worst = worst.max(rel);
        ensure!(rel <= 1e-12, "tensor {i}: scale {} vs mean|W| {alpha}", t.scale);
        let codes: Vec<i8> = w.iter().map(|x| (x / alpha).round().clamp(-1.0, 1.0) as i8).collect();
        ensure!(codes == t.values, "tensor {i}: codes differ from round(clip(W / mean|W|))");
        let again = quantize_weights(&magnet_core::quantcore::dequantize(&t));
        ensure!(again.values == t.values, "tensor {i}: not closed under re-quantization");

        let x: Vec<f64> = (0..len).map(|_| r.gen_range(-spread..spread)).collect();
        let q = quantize_activations(&x);
        let (arg, _) = x
            .iter()
            .enumerate()
            .fold((0, 0f64), |(bi, bv), (j, v)| if v.abs() > bv { (j, v.abs()) } else { (bi, bv) });
        let want = if x[arg] < 0.0 { -127 } else { 127 };
        ensure!(q.values[arg] == want, "tensor {i}: activation max maps to {}", q.values[arg]);
        ensure!(q.values.iter().all(|v| v.unsigned_abs() <= 127), "tensor {i}: activation code out of range");
    }
    Ok(format!("1e5 tensors ternary and closed; scale within {worst:.1e} of exact mean|W|; max -> +-127"))
}

/// First version (1-based) at which the last `patience` best-score gains are all below `epsilon`.
fn expected_stop(best: &[f64], epsilon: f64, patience: usize) -> Option<usize> {
    (patience + 1..=best.len()).find(|&n| (n - patience..n).all(|j| best[j] - best[j - 1] < epsilon))
}

// 13
fn autoloop() -> Check {
    let mut r = rng(13);
    for case in 0..500 {
        let len = r.gen_range(1..15);
        let mut scores = Vec::with_capacity(len);
        let mut s = r.gen_range(0.3..0.6);
        for _ in 0..len {
            s += if r.gen::<f64>() < 0.3 { r.gen_range(-0.05..0.0) } else { r.gen_range(0.0..0.04) };
            scores.push(s);
        }
        let epsilon = r.gen_range(0.001..0.02);
        let patience = r.gen_range(1..4);
        let params = AutoloopParams {
            convergence: ConvergenceParams::new(epsilon, patience).map_err(|e| e.to_string())?,
            max_versions: 30,
            max_strategies: 4,
        };
        let mut lab = ScriptedLab::new(scores.clone());
        let out = run_autoresearch(&mut lab, &params).map_err(|e| e.to_string())?;
        let mut best = Vec::new();
        let mut b = 0f64;
        for s in &scores {
            b = b.max(*s);
            best.push(b);
        }
        let got = out.best_scores();
        ensure!(got.windows(2).all(|w| w[1] >= w[0]), "case {case}: best score decreased");
        ensure!(got == best[..got.len()], "case {case}: best scores {got:?} != running max");
        match expected_stop(&best, epsilon, patience) {
            Some(v) => ensure!(
                out.stop == StopReason::Converged && got.len() == v,
                "case {case}: stopped {:?} at {}, expected convergence at {v}",
                out.stop,
                got.len()
            ),
            None => ensure!(
                out.stop == StopReason::Exhausted && got.len() == len,
                "case {case}: stopped {:?} at {} without convergence",
                out.stop,
                got.len()
            ),
        }
    }
    let report = run_autoloop(&scenario_file("autoloop.toml")).map_err(|e| e.to_string())?;
    ensure!(report.ok(), "toy run violations: {:?}", report.violations);
    let from = report.summary["baseline_family"].as_str().unwrap_or_default().to_string();
    let to = report.summary["best_family"].as_str().unwrap_or_default().to_string();
    ensure!(!from.is_empty() && from != to, "no pivot: baseline {from}, best {to}");
    Ok(format!("500 scripted sequences stop per (epsilon, p); best monotone; pivot {from} -> {to}"))
}

fn digest(report: &RunReport) -> String {
    let mut h = Sha256::new();
    for (name, body) in &report.files {
        h.update(name.as_bytes());
        h.update(body.as_bytes());
    }
    hex::encode(h.finalize())
}

// 14
fn determinism() -> Check {
    type Runner = fn(&Scenario) -> Result<RunReport, magnet_core::scenario::ScenarioError>;
    let runs: [(&str, Runner); 5] = [
        ("diloco_lossy.toml", run_diloco),
        ("diloco.toml", run_diloco),
        ("storage.toml", run_storage),
        ("ledger.toml", run_ledger),
        ("autoloop.toml", run_autoloop),
    ];
    let mut names = Vec::new();
    for (file, run) in runs {
        let s = scenario_file(file);
        let a = run(&s).map_err(|e| e.to_string())?;
        let b = run(&s).map_err(|e| e.to_string())?;
        ensure!(digest(&a) == digest(&b) && a == b, "{file}: reruns differ");
        let mut shifted = s.clone();
        shifted.seed += 1;
        if file.starts_with("diloco") || file.starts_with("storage") {
            let c = run(&shifted).map_err(|e| e.to_string())?;
            ensure!(c.summary["trace_digest"] != a.summary["trace_digest"], "{file}: seed ignored");
        }
        names.push(file.trim_end_matches(".toml"));
    }
    Ok(format!("byte-identical reruns for {}", names.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 14] = [
        ("RS completeness", rs_completeness),
        ("GF(2^8) soundness", gf_soundness),
        ("FedAvg reduction", fedavg_reduction),
        ("DiLoCo convergence", diloco_convergence),
        ("Round-machine safety", round_safety),
        ("Ledger conservation", ledger_conservation),
        ("Sybil invariance", sybil_invariance),
        ("Commit-reveal", commit_reveal),
        ("IC calculator", ic_calculator),
        ("Identity", identity),
        ("Storage daemon", storage_daemon),
        ("Quantization", quantization),
        ("Autoloop", autoloop),
        ("Determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
