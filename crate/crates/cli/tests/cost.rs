use rppg_cli::cost::{backbone_cost, conv_flops, linear_params, pfe_cost, report_cost, tfa_cost};
use rppg_core::backbone::{Model, ModelConfig, TfaSetting};
use rppg_core::flow::FlowConfig;

#[test]
fn mlp_input_layer_parameters() {
    assert_eq!(linear_params(146, 128), 146 * 128 + 128);
    // Default PFE: conv block (3→16, 5×5, plus norm) and the 146→128→16 MLP.
    let m = ModelConfig::default();
    let conv = 3 * 25 * 16 + 16 + 2 * 16;
    assert_eq!(pfe_cost(&m, 1).params, conv + 146 * 128 + 128 + 128 * 16 + 16);
}

#[test]
fn backbone_first_stage_flops() {
    let stage0 = 2 * (16 * 27) * 32 * 160 * 64 * 64;
    assert_eq!(conv_flops(16, 27, 32, 160 * 64 * 64), stage0);
    let m = ModelConfig::default();
    let rest = conv_flops(32, 27, 32, 160 * 32 * 32) + 2 * conv_flops(32, 27, 32, 160 * 16 * 16) + 2 * 32 * 160;
    assert_eq!(backbone_cost(&m, 160).flops, stage0 + rest);
}

#[test]
fn flops_are_linear_in_t() {
    for tfa in [TfaSetting::Off, TfaSetting::Single, TfaSetting::Bidirectional] {
        let m = ModelConfig { tfa, ..Default::default() };
        let a = report_cost(&m, 80);
        let b = report_cost(&m, 160);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2 * x.flops, y.flops, "{}", x.module);
            assert_eq!(x.params, y.params);
        }
    }
}

#[test]
fn parameter_counts_match_the_model() {
    for (tfa, pfe) in [(TfaSetting::Bidirectional, true), (TfaSetting::Off, false), (TfaSetting::Off, true)] {
        let m = ModelConfig { tfa, pfe, ..Default::default() };
        let model = Model::new(m.clone(), FlowConfig::default(), 0).unwrap();
        assert_eq!(pfe_cost(&m, 1).params as usize, model.params.count("pfe1."));
        assert_eq!(tfa_cost(&m, 1).params as usize, model.params.count("tfa."));
        assert_eq!(backbone_cost(&m, 1).params as usize, model.params.count("backbone."));
    }
    // Single mode runs one direction; the other exists only for layout.
    let m = ModelConfig { tfa: TfaSetting::Single, ..Default::default() };
    let model = Model::new(m.clone(), FlowConfig::default(), 0).unwrap();
    let unused = model.params.count("tfa.bwd.");
    assert_eq!(tfa_cost(&m, 1).params as usize, model.params.count("tfa.") - unused);
}

#[test]
fn total_is_the_sum_of_modules() {
    let rows = report_cost(&ModelConfig::default(), 160);
    let names: Vec<&str> = rows.iter().map(|r| r.module.as_str()).collect();
    assert_eq!(names, ["pfe", "tfa", "backbone", "total"]);
    assert_eq!(rows[3].flops, rows[..3].iter().map(|r| r.flops).sum::<u64>());
    assert_eq!(rows[3].params, rows[..3].iter().map(|r| r.params).sum::<u64>());
}
