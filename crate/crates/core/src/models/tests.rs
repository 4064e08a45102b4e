//! Structural tests for the model builders: declared shapes, node lists,
//! parameter sharing, and parameter accounting.

use super::build::EF_MID_INIT;
use super::*;
use crate::layers::RnnCell;
use crate::rng::{Prng, Stream};

fn rng() -> Prng {
    Prng::new(7, Stream::Init)
}

fn build(config: ModelConfig) -> Model {
    build_model(&config, &mut rng()).unwrap()
}

#[test]
fn stem_output_shape_at_full_width() {
    let model = build(ModelConfig::new(Family::I3dMini));
    assert_eq!(model.inputs.len(), 1);
    assert_eq!(model.inputs[0].shape, vec![28, 112, 112, 1]);
    let stem_out = model.group_output_shape("stem", 1).unwrap();
    assert_eq!(stem_out, vec![1, 28, 28, 28, 192]);
}

#[test]
fn im3_concat_produces_256_channels() {
    let model = build(ModelConfig::new(Family::I3dMini));
    let im3_out = model.group_output_shape("im3", 1).unwrap();
    assert_eq!(*im3_out.last().unwrap(), 256);
}

#[test]
fn no_kernel_has_extent_five() {
    for family in [Family::I3dMini, Family::I3dOriginal] {
        let model = build(ModelConfig::new(family));
        for node in &model.nodes {
            if let LayerOp::Conv { spec, .. } = &node.op {
                assert!(
                    spec.kernel.iter().all(|&k| k != 5),
                    "{} has a 5-extent kernel",
                    node.name
                );
            }
        }
    }
}

#[test]
fn mini_node_list_is_stem_im3_head() {
    let model = build(ModelConfig::new(Family::I3dMini));
    assert_eq!(model.block_names(), vec!["stem", "im3", "head"]);
}

#[test]
fn original_inserts_im4_im5_before_head() {
    let mini = build(ModelConfig::new(Family::I3dMini)).block_names();
    let original = build(ModelConfig::new(Family::I3dOriginal)).block_names();
    assert_eq!(original, vec!["stem", "im3", "im4", "im5", "head"]);
    // Subset structure: removing im4/im5 recovers the mini list.
    let filtered: Vec<String> = original
        .into_iter()
        .filter(|g| g != "im4" && g != "im5")
        .collect();
    assert_eq!(filtered, mini);
}

#[test]
fn two_stream_declares_spatial_and_temporal_inputs() {
    let model = build(ModelConfig::new(Family::TwoStream));
    let shapes: Vec<&[usize]> = model.inputs.iter().map(|i| i.shape.as_slice()).collect();
    assert_eq!(shapes, vec![&[28, 112, 112, 1][..], &[27, 112, 112, 1][..]]);
}

#[test]
fn fusion_families_declare_dual_inputs() {
    for family in [
        Family::FusionCombination,
        Family::FusionNewCombination,
        Family::FusionDualInput,
        Family::FusionDualTruncated,
    ] {
        let model = build(ModelConfig::new(family));
        assert_eq!(model.inputs.len(), 2, "{}", family.label());
        assert_eq!(model.inputs[0].shape[0], 28);
        assert_eq!(model.inputs[1].shape[0], 27);
    }
}

#[test]
fn single_input_splits_after_backbone() {
    let model = build(ModelConfig::new(Family::FusionSingleInput));
    assert_eq!(model.inputs.len(), 1);
    let groups = model.block_names();
    assert_eq!(groups, vec!["stem", "im3", "split", "stream_a", "stream_b", "head"]);
    // Both split nodes read from the final im3 node.
    let im3_last = model.nodes.iter().rposition(|n| n.group == "im3").unwrap();
    let splits: Vec<&ModelNode> = model.nodes.iter().filter(|n| n.group == "split").collect();
    assert_eq!(splits.len(), 2);
    for s in splits {
        assert_eq!(s.inputs, vec![PortRef::Node(im3_last)]);
        assert!(matches!(s.op, LayerOp::SliceChannels { .. }));
    }
}

#[test]
fn dual_input_shares_one_backbone_parameter_set() {
    for family in [Family::FusionDualInput, Family::FusionDualTruncated] {
        let model = build(ModelConfig::new(family));
        // Two conv nodes per backbone layer, one parameter set.
        let conv_a_nodes: Vec<&ModelNode> = model
            .nodes
            .iter()
            .filter(|n| n.name.starts_with("stem/conv_a") && matches!(n.op, LayerOp::Conv { .. }))
            .collect();
        assert_eq!(conv_a_nodes.len(), 2, "{}", family.label());
        let weights: Vec<&str> = conv_a_nodes
            .iter()
            .map(|n| match &n.op {
                LayerOp::Conv { weight, .. } => weight.as_str(),
                other => panic!("expected conv, got {other:?}"),
            })
            .collect();
        assert_eq!(weights[0], weights[1], "{}", family.label());
        // And no duplicated backbone parameters exist.
        let backbone_weights = model
            .params
            .iter()
            .filter(|p| p.name.starts_with("backbone/"))
            .count();
        assert!(backbone_weights > 0);
    }
}

#[test]
fn combination_uses_separate_backbones_per_stream() {
    let model = build(ModelConfig::new(Family::FusionCombination));
    assert!(model.params.iter().any(|p| p.name.starts_with("spatial/stem")));
    assert!(model.params.iter().any(|p| p.name.starts_with("temporal/stem")));
}

#[test]
fn conv2_kernel_variants_place_expected_kernels() {
    for (kernel, want) in [
        (Conv2Kernel::K1x1x1, [1, 1, 1]),
        (Conv2Kernel::K3x1x1, [3, 1, 1]),
        (Conv2Kernel::K3x3x3, [3, 3, 3]),
    ] {
        let config = ModelConfig {
            conv2_kernel: kernel,
            ..ModelConfig::new(Family::I3dMini)
        };
        let model = build(config);
        let conv2 = model.nodes.iter().find(|n| n.name == "stem/conv2").unwrap();
        match &conv2.op {
            LayerOp::Conv { spec, .. } => assert_eq!(spec.kernel, want),
            other => panic!("expected conv, got {other:?}"),
        }
    }
}

#[test]
fn double_conv2_inserts_two_consecutive_3x3x3() {
    let config = ModelConfig {
        conv2_kernel: Conv2Kernel::Double3x3x3,
        ..ModelConfig::new(Family::I3dMini)
    };
    let model = build(config);
    let names: Vec<&str> = model
        .nodes
        .iter()
        .filter(|n| matches!(n.op, LayerOp::Conv { .. }) && n.name.starts_with("stem/conv2"))
        .map(|n| n.name.as_str())
        .collect();
    assert_eq!(names, vec!["stem/conv2", "stem/conv2b"]);
    for node in &model.nodes {
        if let LayerOp::Conv { spec, .. } = &node.op {
            if node.name.starts_with("stem/conv2") {
                assert_eq!(spec.kernel, [3, 3, 3]);
            }
        }
    }
    // The second conv2 consumes the first's ReLU directly.
    let first_relu = model.nodes.iter().position(|n| n.name == "stem/conv2.relu").unwrap();
    let second = model.nodes.iter().find(|n| n.name == "stem/conv2b").unwrap();
    assert_eq!(second.inputs, vec![PortRef::Node(first_relu)]);
}

#[test]
fn head_variants_end_linear_and_differ_only_in_head_nodes() {
    let base = build(ModelConfig::new(Family::I3dMini));
    for head in [HeadVariant::OG, HeadVariant::B, HeadVariant::C] {
        let model = build(ModelConfig {
            head,
            ..ModelConfig::new(Family::I3dMini)
        });
        // Scalar output per shape propagation.
        assert_eq!(model.propagate_shapes(3).unwrap().last().unwrap(), &vec![3, 1]);
        // Non-head nodes are structurally identical to the default build.
        let trunk = |m: &Model| -> Vec<ModelNode> {
            m.nodes.iter().filter(|n| n.group != "head").cloned().collect()
        };
        assert_eq!(trunk(&model), trunk(&base), "{head:?}");
        // And the final node is linear: a dense with linear activation, or a
        // GAP over the head conv for variant B.
        match &model.nodes.last().unwrap().op {
            LayerOp::Dense { activation, out_dim, .. } => {
                assert_eq!(*activation, crate::layers::Activation::Linear);
                assert_eq!(*out_dim, 1);
            }
            LayerOp::GlobalAvgPool => {}
            other => panic!("unexpected final op {other:?}"),
        }
    }
}

#[test]
fn regression_bias_starts_at_ef_midrange() {
    for family in Family::ALL {
        let model = build(ModelConfig {
            height: 32,
            width: 32,
            width_multiplier: 0.25,
            ..ModelConfig::new(family)
        });
        let has_mid_bias = model.params.iter().any(|p| {
            p.name.ends_with("/b") && p.value.data().iter().all(|&v| v == EF_MID_INIT)
        });
        assert!(has_mid_bias, "{} missing mid-range bias", family.label());
    }
}

#[test]
fn invalid_configs_are_rejected_with_reason() {
    let bad_mixed = ModelConfig {
        norm: NormMode::Mixed,
        ..ModelConfig::new(Family::I3dMini)
    };
    let err = build_model(&bad_mixed, &mut rng()).unwrap_err();
    assert!(err.to_string().contains("CNN_RNN_SCRATCH"), "{err}");

    let bad_conv2 = ModelConfig {
        conv2_kernel: Conv2Kernel::K3x3x3,
        ..ModelConfig::new(Family::TwoStream)
    };
    let err = build_model(&bad_conv2, &mut rng()).unwrap_err();
    assert!(err.to_string().contains("conv2_kernel"), "{err}");

    let bad_head = ModelConfig {
        head: HeadVariant::OG,
        ..ModelConfig::new(Family::FusionSingleInput)
    };
    assert!(build_model(&bad_head, &mut rng()).is_err());

    let bad_cell = ModelConfig {
        rnn_cell: Some(RnnCell::Lstm),
        ..ModelConfig::new(Family::I3dMini)
    };
    assert!(build_model(&bad_cell, &mut rng()).is_err());

    let bad_width = ModelConfig {
        width_multiplier: 1.5,
        ..ModelConfig::new(Family::I3dMini)
    };
    assert!(build_model(&bad_width, &mut rng()).is_err());
}

#[test]
fn cnn_rnn_uses_2d_kernels_and_requested_cell() {
    for cell in [RnnCell::Gru, RnnCell::Lstm] {
        let model = build(ModelConfig {
            rnn_cell: Some(cell),
            height: 32,
            width: 32,
            width_multiplier: 0.25,
            ..ModelConfig::new(Family::CnnRnnScratch)
        });
        assert_eq!(model.inputs[0].shape, vec![28, 32, 32, 3]);
        for node in &model.nodes {
            if let LayerOp::Conv { spec, .. } = &node.op {
                assert_eq!(spec.kernel[0], 1, "{} temporal extent", node.name);
            }
            if let LayerOp::Recurrent { cell: c, .. } = &node.op {
                assert_eq!(*c, cell);
            }
        }
    }
}

#[test]
fn mixed_norm_adds_hidden_layer_norm() {
    let model = build(ModelConfig {
        norm: NormMode::Mixed,
        height: 32,
        width: 32,
        width_multiplier: 0.25,
        ..ModelConfig::new(Family::CnnRnnScratch)
    });
    let recurrent = model
        .nodes
        .iter()
        .find_map(|n| match &n.op {
            LayerOp::Recurrent { hidden_norm, .. } => Some(hidden_norm.clone()),
            _ => None,
        })
        .unwrap();
    assert!(recurrent.is_some());
    // CNN part keeps batch norm under mixed.
    for node in &model.nodes {
        if let LayerOp::Norm { kind, .. } = &node.op {
            assert_eq!(*kind, crate::layers::NormKind::Batch);
        }
    }
}

#[test]
fn count_params_matches_structure_walk_oracle() {
    use std::collections::BTreeSet;
    let model = build(ModelConfig {
        width_multiplier: 0.25,
        ..ModelConfig::new(Family::I3dMini)
    });
    // Independent accounting: walk the node structure and sum the sizes each
    // op implies, deduplicating shared names.
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut total = 0usize;
    for node in &model.nodes {
        match &node.op {
            LayerOp::Conv { spec, weight, .. } => {
                if seen.insert(weight) {
                    total += spec.param_count();
                }
            }
            LayerOp::Norm { features, gamma, .. } => {
                if seen.insert(gamma) {
                    total += 2 * features;
                }
            }
            LayerOp::Dense { in_dim, out_dim, weight, .. } => {
                if seen.insert(weight) {
                    total += in_dim * out_dim + out_dim;
                }
            }
            LayerOp::Recurrent { cell, input_dim, hidden, w, hidden_norm, .. }
                if seen.insert(w) =>
            {
                let gates = cell.gates();
                total += input_dim * gates * hidden + hidden * gates * hidden + gates * hidden;
                if hidden_norm.is_some() {
                    total += 2 * hidden;
                }
            }
            _ => {}
        }
    }
    assert_eq!(model.count_params(), total);
}

#[test]
fn mini_has_fewer_params_than_original() {
    let mini = build(ModelConfig::new(Family::I3dMini));
    let original = build(ModelConfig::new(Family::I3dOriginal));
    assert!(mini.count_params() < original.count_params());
}

#[test]
fn dense_and_conv_param_count_examples() {
    let mut r = rng();
    let (w, b) = crate::layers::dense_init(&mut r, 4, 2);
    assert_eq!(w.numel() + b.numel(), 10);
    let conv = crate::layers::ConvSpec::same([3, 3, 3], 1, 8);
    assert_eq!(conv.param_count(), 224);
}
