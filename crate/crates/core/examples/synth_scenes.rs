//! Render a synthetic scene, corrupt its boxes into pseudo labels and
//! write a small dataset to disk.
//!
//! cargo run --example synth_scenes -- /tmp/wend-scenes

use std::path::PathBuf;

use wend::synthdata::{
    corrupt_boxes, render_scene, sample_scene_spec, simulate_class_scores, write_dataset, ClassScoreModel,
    DataConfig, NoiseModel, SceneParams,
};

fn main() -> wend::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("wend-scenes"), PathBuf::from);

    let params = SceneParams::default();
    let spec = sample_scene_spec(&params, 42)?;
    let scene = render_scene(&spec, 42)?;
    for (o, b) in spec.objects.iter().zip(&scene.gt_boxes) {
        println!("{:<14} nominal {:?}  tight {:?}", o.shape.to_string(), o.nominal_box()?.to_array(), b.to_array());
    }

    let noise = NoiseModel {
        jitter_sigma: 0.1,
        wrong_box_prob: 0.5,
        drop_prob: 0.0,
    };
    for p in corrupt_boxes(&scene.gt_boxes, &noise, params.image_size, 42)? {
        println!("pseudo {:?} ({:?})", p.bbox.to_array(), p.provenance);
    }
    let scores = simulate_class_scores(scene.gt_classes[0], &ClassScoreModel::default(), params.num_classes, 42)?;
    println!("class scores {scores:.3?} for class {}", scene.gt_classes[0]);

    let cfg = DataConfig {
        train_count: 20,
        test_count: 5,
        ..DataConfig::default()
    };
    for path in write_dataset(&cfg, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
