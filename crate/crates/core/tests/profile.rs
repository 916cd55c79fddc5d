use thsgr::profile::*;

#[test]
fn reference_closed_forms() {
    assert_eq!(count_flops_msa(226, 64, 4), 21_764_704);
    assert_eq!(count_params_msa(64), 16_640);
    assert_eq!(count_flops_modulator(226, 64, 3), 5_857_920);
    assert_eq!(count_params_modulator(64, 3), 12_736);
}

#[test]
fn counters_equal_closed_forms() {
    for (n, d) in [(4, 8), (16, 16), (64, 32)] {
        let (flops, params) = measure_msa(n, d, 4, 1).unwrap();
        assert_eq!(
            flops,
            count_flops_msa(n as u64, d as u64, 4),
            "msa n={n} d={d}"
        );
        assert_eq!(params, count_params_msa(d as u64));
        let core = measure_attention_core(n, d, 4, 1).unwrap();
        assert_eq!(core, count_flops_attention_core(n as u64, d as u64, 4));
        let (flops, params) = measure_modulator(n, d, 1).unwrap();
        assert_eq!(
            flops,
            count_flops_modulator(n as u64, d as u64, 3),
            "modulator n={n} d={d}"
        );
        assert_eq!(params, count_params_modulator(d as u64, 3));
    }
}

#[test]
fn doubling_tokens_scales_as_expected() {
    let (n, d) = (128, 16);
    let core = |n| measure_attention_core(n, d, 4, 2).unwrap() as f64;
    let ratio = core(2 * n) / core(n);
    assert!((ratio - 4.0).abs() <= 0.4, "{ratio}");
    let m = |n| measure_modulator(n, d, 2).unwrap().0;
    assert_eq!(m(2 * n), 2 * m(n));
}

#[test]
fn modulator_is_cheaper_than_attention_at_reference_sizes() {
    for (n, d) in REFERENCE_CONFIGS {
        let (n, d) = (n as u64, d as u64);
        assert!(count_flops_modulator(n, d, 3) < count_flops_msa(n, d, 4));
        assert!(count_params_modulator(d, 3) < count_params_msa(d));
    }
}

#[test]
fn report_csv_layout() {
    let report = ProfileReport::build(&[(10, 8)], 2, 0).unwrap();
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("block,config_N,config_D,flops_measured,flops_closed_form,params")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(cols[3], cols[4]);
    }
}
