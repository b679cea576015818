//! Pretrains a small decoder on the toy arithmetic corpus, then checks that
//! it continues a question with an answer and that its checksum survives a
//! save/load round trip.

use softsrv::backbone::{pretrain_backbone, BackboneModel};
use softsrv::config::ExperimentConfig;
use softsrv::pipeline::{backbone_corpus, prepare_data};

fn main() -> softsrv::error::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.backbone.d_model = 32;
    cfg.backbone.n_layers = 2;
    cfg.backbone.ffn_dim = 64;
    cfg.backbone.pretrain.steps = 600;
    let data = prepare_data(&cfg)?;
    let corpus = backbone_corpus(&data);
    println!("vocab {} tokens, corpus {} sequences", data.vocab.len(), corpus.len());

    let pcfg = cfg.pretrain_config(&cfg.backbone, "pretrain/backbone");
    let (model, trace) = pretrain_backbone(cfg.backbone.backbone_config(data.vocab.len()), data.vocab.clone(), &corpus, &pcfg)?;
    println!("loss {:.3} -> {:.3} over {} steps", trace.leading_mean(50), trace.trailing_mean(50), trace.losses.len());

    let q = data.vocab.encode(&data.target.test[0].question);
    let cont = model.sample_continuation(&model.bos_prompt(), &q, 8, 0.0, 0)?;
    println!("{} -> {}", data.target.test[0].question, data.vocab.decode(&cont));

    let path = std::env::temp_dir().join("softsrv-example-backbone.ckpt");
    model.save(&path)?;
    let back = BackboneModel::load(&path)?;
    println!("checksum {} (round trip equal: {})", &model.checksum()[..16], back.checksum() == model.checksum());
    Ok(())
}
