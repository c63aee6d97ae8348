use rwkv_core::bench::{bench_baseline_attention, bench_generation, write_csv, BenchRecord, CSV_HEADER};
use rwkv_core::init::init_random;
use rwkv_core::model::{flops_per_token, ModelConfig};

fn median_ms(recs: &[BenchRecord], around: usize, half: usize) -> f64 {
    let mut v: Vec<f64> = recs[around - half..=around + half].iter().map(|r| r.per_token_ms).collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn baseline_per_token_time_grows_with_context() {
    let cfg = ModelConfig::byte_level(512, 1, 4096);
    let recs = bench_baseline_attention::<f64>(&cfg, 2050).unwrap();
    let flops_ratio = recs[2000].flops as f64 / recs[200].flops as f64;
    let time_ratio = median_ms(&recs, 2000, 40) / median_ms(&recs, 200, 40);
    assert!(flops_ratio > 2.0, "flop ratio {flops_ratio}");
    assert!(time_ratio >= 0.6 * flops_ratio, "time ratio {time_ratio}, flop ratio {flops_ratio}");
}

#[test]
fn rwkv_cost_does_not_grow_with_position() {
    let cfg = ModelConfig::byte_level(64, 2, 64);
    let m = init_random::<f64>(&cfg, 0, 0.5).unwrap();
    let recs = bench_generation(&m, 1000, 5).unwrap();
    let flops = flops_per_token(&cfg).unwrap();
    assert!(recs.iter().all(|r| r.flops == flops && r.state_scalars == 5 * 64 * 2));
    let late = median_ms(&recs, 900, 40);
    let early = median_ms(&recs, 100, 40);
    assert!(late < 2.0 * early, "early {early} ms, late {late} ms");
}

#[test]
fn csv_round_trips_through_a_reader() {
    let cfg = ModelConfig::byte_level(8, 1, 16);
    let m = init_random::<f64>(&cfg, 0, 0.5).unwrap();
    let recs = bench_generation(&m, 120, 0).unwrap();
    let mut buf = Vec::new();
    write_csv(&recs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|f| f.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 120);
    for (row, rec) in rows.iter().zip(&recs) {
        assert_eq!(row[0] as usize, rec.token_index);
        assert_eq!(row[3] as usize, rec.state_scalars);
    }
}
