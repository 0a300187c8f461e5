use efa_core::analysis::{count_flops, count_params, layer_rows, model_size_bytes};
use efa_core::io::weights::collect_tensors;
use efa_core::io::Precision;
use efa_core::{Model, ModelConfig};

/// Default config at 640: (layer, params, flops, output shape).
const FROZEN: &[(&str, usize, u64, [usize; 4])] = &[
    ("stem", 696, 140083200, [1, 24, 320, 320]),
    ("stage1.down", 2102, 116454680, [1, 40, 160, 160]),
    ("stage1.block1", 2222, 116659480, [1, 40, 160, 160]),
    ("stage2.down", 6662, 89325360, [1, 80, 80, 80]),
    ("stage2.block1", 7542, 98029360, [1, 80, 80, 80]),
    ("stage2.block2", 7542, 98029360, [1, 80, 80, 80]),
    ("stage3.down", 31208, 102102912, [1, 192, 40, 40]),
    ("stage3.block1", 39464, 127190912, [1, 192, 40, 40]),
    ("stage3.block2", 39464, 127190912, [1, 192, 40, 40]),
    ("stage4.down", 105096, 85124992, [1, 272, 20, 20]),
    ("stage4.block1", 77624, 62424192, [1, 272, 20, 20]),
    ("sppf", 148784, 122944000, [1, 272, 20, 20]),
    ("neck.td1", 94680, 303446912, [1, 192, 40, 40]),
    ("neck.td2", 25014, 320442160, [1, 80, 80, 80]),
    ("neck.bu1", 68766, 222354672, [1, 192, 40, 40]),
    ("neck.bu2", 206176, 166108304, [1, 272, 20, 20]),
    ("head.p3", 116006, 1483776000, [1, 6, 80, 80]),
    ("head.p4", 196646, 628992000, [1, 6, 40, 40]),
    ("head.p5", 254246, 203328000, [1, 6, 20, 20]),
];

fn default_model() -> Model {
    Model::new(&ModelConfig::default()).unwrap()
}

#[test]
fn layer_table_matches_frozen_fixture() {
    let rows = layer_rows(&default_model(), 640).unwrap();
    assert_eq!(rows.len(), FROZEN.len());
    for (row, &(name, params, flops, shape)) in rows.iter().zip(FROZEN) {
        assert_eq!(row.name, name);
        assert_eq!(
            (row.params, row.flops, row.out_shape.dims()),
            (params, flops, shape),
            "{name}"
        );
    }
}

#[test]
fn stem_row_by_hand() {
    // 3x3 conv 3->24 at 320x320 output, no bias, then BN and SiLU.
    let px = 320 * 320;
    let params = 3 * 24 * 9 + 2 * 24;
    let flops = 2 * 9 * 3 * 24 * px + 2 * 24 * px + 24 * px;
    let rows = layer_rows(&default_model(), 640).unwrap();
    assert_eq!((rows[0].params, rows[0].flops), (params, flops as u64));
}

#[test]
fn p5_head_row_by_hand() {
    // CBS 272->80 k3, CBS 80->80 k3, then a biased 1x1 conv to 4 + 2 outputs.
    let px = 20 * 20;
    let cbs = |cin: usize, cout: usize| (cin * cout * 9 + 2 * cout, 2 * 9 * cin * cout * px + 3 * cout * px);
    let (p1, f1) = cbs(272, 80);
    let (p2, f2) = cbs(80, 80);
    let (p3, f3) = (80 * 6 + 6, 2 * 80 * 6 * px);
    let rows = layer_rows(&default_model(), 640).unwrap();
    let p5 = rows.iter().find(|r| r.name == "head.p5").unwrap();
    assert_eq!((p5.params, p5.flops), (p1 + p2 + p3, (f1 + f2 + f3) as u64));
}

#[test]
fn totals_agree_with_rows_and_checkpoint() {
    let m = default_model();
    let rows = layer_rows(&m, 640).unwrap();
    assert_eq!(count_params(&m), rows.iter().map(|r| r.params).sum::<usize>());
    assert_eq!(count_flops(&m, 640).unwrap(), rows.iter().map(|r| r.flops).sum::<u64>());
    let serialized: usize = collect_tensors(&m).iter().map(|t| t.data.len()).sum();
    assert_eq!(count_params(&m), serialized);
    assert_eq!(count_params(&m), 1_429_940);
    assert_eq!(model_size_bytes(&m, Precision::Fp16), 2_865_324);
}

#[test]
fn flops_scale_with_input_area() {
    // Nearly 4x; the ECA channel convolutions are independent of area.
    let m = default_model();
    let (a, b) = (count_flops(&m, 320).unwrap(), count_flops(&m, 640).unwrap());
    assert!(b < 4 * a);
    assert!((b as f64 / a as f64 - 4.0).abs() < 1e-3);
}
