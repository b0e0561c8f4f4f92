// Scratch diagnostics: per-query state of a checkpoint on a dataset.
use std::path::PathBuf;

use owod::checkpoint;
use owod::data::{load_dataset};
use owod::protocol::{Phase, VisibleClass};

fn main() -> owod::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = PathBuf::from(&args[1]);
    let data = PathBuf::from(&args[2]);
    let n_images: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);

    let (det, config, task, _) = checkpoint::load(&ckpt)?;
    let schedule = config.task_schedule();
    let images = load_dataset(&data, &schedule, task, Phase::Eval)?;

    for image in images.iter().take(n_images) {
        println!("== image {} ==", image.image_id);
        for ann in &image.annotations {
            let label = match ann.class {
                VisibleClass::Known(c) => format!("known {c}"),
                VisibleClass::Unknown => "unknown".into(),
            };
            println!(
                "  gt {label}: ({:.3},{:.3},{:.3},{:.3})",
                ann.bbox.cx, ann.bbox.cy, ann.bbox.w, ann.bbox.h
            );
        }
        let out = det.forward_collect(&image.tensor)?;
        // top queries by best class prob
        let nq = out.boxes.len();
        let mut rows: Vec<(usize, f64, f64, f64)> = (0..nq)
            .map(|q| {
                let best_p = (0..det.head_classes.len())
                    .map(|c| out.class_probs[[q, c]])
                    .fold(0.0f64, f64::max);
                let d2 = det
                    .om
                    .mahalanobis_squared(&out.embeddings[det.config.objectness_layer_index - 1].row(q))
                    .unwrap();
                (q, best_p, out.objectness[q], d2)
            })
            .collect();
        rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for &(q, p, obj, d2) in rows.iter().take(8) {
            let b = &out.boxes[q];
            let best_c = (0..det.head_classes.len())
                .max_by(|&a, &c| {
                    out.class_probs[[q, a]]
                        .partial_cmp(&out.class_probs[[q, c]])
                        .unwrap()
                })
                .unwrap();
            println!(
                "  q{q:3} cls{best_c} p={p:.4} pobj={obj:.3e} d2={d2:8.2} box ({:.3},{:.3},{:.3},{:.3})",
                b.cx, b.cy, b.w, b.h
            );
        }
        let d2s: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let mn = d2s.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = d2s.iter().cloned().fold(0.0f64, f64::max);
        println!("  d2 range over queries: [{mn:.2}, {mx:.2}]");
    }

    // population summary: best-covering query for each GT vs background queries
    let mut known_hits: Vec<(f64, f64, f64)> = vec![]; // (p_cls, p_obj, ps)
    let mut unknown_hits: Vec<(f64, f64, f64)> = vec![];
    let mut background: Vec<(f64, f64, f64)> = vec![];
    let gamma = config.eval.gamma;
    for image in &images {
        let out = det.forward_collect(&image.tensor)?;
        let nq = out.boxes.len();
        let mut covered = vec![false; nq];
        for ann in &image.annotations {
            let mut best_q = None;
            let mut best_iou = 0.5f64;
            for q in 0..nq {
                let v = owod::geometry::iou(&out.boxes[q], &ann.bbox);
                if v >= best_iou {
                    best_iou = v;
                    best_q = Some(q);
                }
            }
            if let Some(q) = best_q {
                covered[q] = true;
                let p = (0..det.head_classes.len())
                    .map(|c| out.class_probs[[q, c]])
                    .fold(0.0f64, f64::max);
                let ps = out.objectness[q].powf(gamma) * p.powf(1.0 - gamma);
                let entry = (p, out.objectness[q], ps);
                match ann.class {
                    VisibleClass::Known(_) => known_hits.push(entry),
                    VisibleClass::Unknown => unknown_hits.push(entry),
                }
            }
        }
        for q in 0..nq {
            if !covered[q] {
                let p = (0..det.head_classes.len())
                    .map(|c| out.class_probs[[q, c]])
                    .fold(0.0f64, f64::max);
                let ps = out.objectness[q].powf(gamma) * p.powf(1.0 - gamma);
                background.push((p, out.objectness[q], ps));
            }
        }
    }
    let show = |name: &str, v: &mut Vec<(f64, f64, f64)>| {
        if v.is_empty() {
            println!("{name}: none");
            return;
        }
        for key in 0..3 {
            let mut vals: Vec<f64> = v.iter().map(|t| [t.0, t.1, t.2][key]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |f: f64| vals[((vals.len() - 1) as f64 * f) as usize];
            let label = ["p_cls", "p_obj", "p_s  "][key];
            println!(
                "{name} {label}: n={} q10={:.3e} med={:.3e} q90={:.3e}",
                vals.len(),
                q(0.1),
                q(0.5),
                q(0.9)
            );
        }
    };
    show("KNOWN-hit ", &mut known_hits);
    show("UNKN-hit  ", &mut unknown_hits);
    show("BACKGROUND", &mut background);
    Ok(())
}

// summary mode appended: stats over all images by query type
