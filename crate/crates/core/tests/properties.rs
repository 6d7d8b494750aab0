mod common;

macro_rules! property_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                if let Err(e) = common::$name() {
                    panic!("{e}");
                }
            }
        )*
    };
}

property_tests!(
    prop_composition_identity,
    prop_brightening_monotone_and_in_range,
    prop_losses_non_negative,
    prop_losses_zero_at_optimum,
    prop_ablation_matches_removed_term,
    prop_smoothness_edges_in_r_license_edges_in_l,
    prop_weights_round_trip,
    prop_maps_round_trip,
    prop_run_deterministic,
    prop_graph_deterministic,
    prop_single_step_exact,
    prop_adam_matches_reference,
    prop_backward_linear,
    prop_frozen_leaves_untouched,
    prop_mode_partition,
    prop_decoder_shape_and_range,
    prop_metrics_symmetric,
    prop_psnr_decreases_with_noise,
);

#[test]
fn property_list_is_complete() {
    assert_eq!(common::PROPERTIES.len(), 18);
}
