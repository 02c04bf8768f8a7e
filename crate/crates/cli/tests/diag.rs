//! Temporary diagnostic: per-class-pair 2-way 1-shot accuracy on a split,
//! for the pooled-cosine baseline and (optionally) the trained matcher.

use std::path::Path;

use sgm_core::backbone::load_backbone_trunk;
use sgm_core::episodic::{extract_split_features, SplitFeatures};
use sgm_core::graph_matching::{match_graphs, MatcherParams};
use sgm_core::scene_graph::build_graph;
use sgm_core::synthscene::load_dataset;
use sgm_core::tensor::Tensor;

fn pooled(t: &Tensor) -> Vec<f32> {
    let (c, cells) = (t.shape()[0], t.numel() / t.shape()[0]);
    (0..c)
        .map(|ch| t.data()[ch * cells..(ch + 1) * cells].iter().sum::<f32>() / cells as f32)
        .collect()
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[test]
#[ignore]
fn save_init_matcher() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let params = MatcherParams::new(
        sgm_core::scene_graph::ArchConfig::desk(),
        sgm_core::graph_matching::Ablation::default(),
        &mut rng,
    );
    params.save(Path::new("/tmp/m_init.ckpt")).unwrap();
}

#[test]
#[ignore]
fn pairwise_two_way() {
    let data = load_dataset(Path::new("/tmp/sgm-data")).unwrap();
    let bb = std::env::var("BB").unwrap_or_else(|_| "/tmp/bb1.ckpt".into());
    let trunk = load_backbone_trunk(Path::new(&bb)).unwrap();
    let split = match std::env::var("SPLIT").as_deref() {
        Ok("val") => &data.val,
        Ok("train") => &data.train,
        _ => &data.test,
    };
    let feats: SplitFeatures = extract_split_features(&trunk, split).unwrap();
    let matcher = std::env::var("MATCHER")
        .ok()
        .map(|p| MatcherParams::load(Path::new(&p)).unwrap());

    let n = feats.classes.len();
    let ids: Vec<u32> = split.classes.iter().map(|c| c.class_id).collect();
    let graphs: Vec<Vec<_>> = match &matcher {
        Some(m) => feats
            .classes
            .iter()
            .map(|imgs| {
                imgs.iter()
                    .map(|f| build_graph(f, &m.gcm).unwrap())
                    .collect()
            })
            .collect(),
        None => Vec::new(),
    };
    let pools: Vec<Vec<Vec<f32>>> = feats
        .classes
        .iter()
        .map(|imgs| imgs.iter().map(pooled).collect())
        .collect();

    println!("\npair: cosine-2way / sgmnet-2way (support img 0..5 x query img 10..30)");
    for a in 0..n {
        for b in (a + 1)..n {
            let mut cos_ok = 0usize;
            let mut net_ok = 0usize;
            let mut total = 0usize;
            for s in 0..5 {
                for q in 10..30 {
                    total += 1;
                    let ca = cos(&pools[a][q], &pools[a][s]);
                    let cb = cos(&pools[a][q], &pools[b][s]);
                    if ca > cb {
                        cos_ok += 1;
                    }
                    if let Some(m) = &matcher {
                        let sa = match_graphs(&graphs[a][q], &graphs[a][s], &m.gmm).unwrap();
                        let sb = match_graphs(&graphs[a][q], &graphs[b][s], &m.gmm).unwrap();
                        if sa > sb {
                            net_ok += 1;
                        }
                    }
                }
            }
            println!(
                "classes {}-{}: cosine {:.3}  sgmnet {:.3}",
                ids[a],
                ids[b],
                cos_ok as f64 / total as f64,
                net_ok as f64 / total as f64
            );
        }
    }
}
