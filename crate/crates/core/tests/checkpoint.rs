mod common;

use gemma_core::checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, CheckpointError, ALIGN,
};
use gemma_core::model::GemmaModel;
use gemma_core::text::TokenId;

fn round_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::nano_model(40);
    let a = dir.path().join("a.gmmf");
    let b = dir.path().join("b.gmmf");
    save_checkpoint(&m, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, m);
    assert_eq!(loaded.checksum(), m.checksum());
}

#[test]
fn loaded_model_forward_is_bit_identical() {
    let m = common::nano_model(41);
    let loaded = from_bytes(&to_bytes(&m).unwrap()).unwrap();
    let toks = [TokenId(1), TokenId(270), TokenId(9), TokenId(511)];
    let a = m.forward(&toks, &mut m.new_cache()).unwrap();
    let b = loaded.forward(&toks, &mut loaded.new_cache()).unwrap();
    let bits = |x: &gemma_core::numerics::Matrix| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn file_size_follows_the_layout_arithmetic() {
    let m = GemmaModel::zeros(common::nano()).unwrap();
    let bytes = to_bytes(&m).unwrap();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    // nano: vocab 512, d 64, 4 layers, q 4x16, kv 1x16, ffn branch 128
    let (d, v, q, kv, f) = (64usize, 512usize, 64usize, 16usize, 128usize);
    let per_block = [d, d * q, d * kv, d * kv, q * d, d, d * f, d * f, f * d];
    let payload: usize = round_up(4 * v * d)
        + 4 * per_block.iter().map(|&n| round_up(4 * n)).sum::<usize>()
        + round_up(4 * d);
    assert_eq!(bytes.len(), round_up(16 + header_len) + payload);
}

#[test]
fn unwritable_path_is_an_io_error() {
    let m = common::nano_model(0);
    let err = save_checkpoint(&m, "/nonexistent-dir/x/model.gmmf").unwrap_err();
    assert!(matches!(err, CheckpointError::Io(_)));
    assert!(matches!(load_checkpoint("/nonexistent-dir/missing.gmmf"), Err(CheckpointError::Io(_))));
}

#[test]
fn header_records_the_full_config() {
    let m = common::nano_model(0);
    let bytes = to_bytes(&m).unwrap();
    let header = gemma_core::checkpoint::read_header(&bytes).unwrap();
    assert_eq!(&header.config, m.config());
    let json = serde_json::to_value(&header.config).unwrap();
    for key in ["rope_base", "norm_eps", "embed_scale", "gelu", "rope_pairing", "query_scaling"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}
