//! Evaluates the self-distillation losses on small hand-made inputs.

use meddino::ssl::{dino_loss, gram_loss, ibot_loss, koleo_loss, stage_loss, teacher_probs, LossParts};
use meddino::{Graph, Tensor};

fn main() -> anyhow::Result<()> {
    let mut g = Graph::new();

    // uniform student against one-hot teachers over two prototypes
    let student = g.input(Tensor::zeros(vec![1, 2]))?;
    let teacher = Tensor::new(vec![1, 2], vec![1.0, 0.0])?;
    let d = dino_loss(&mut g, &[student, student], &[teacher.clone(), teacher], 0.1)?;
    println!("dino, uniform student: {:.6} (ln 2 = {:.6})", g.value(d).item(), 2f64.ln());

    let logits = Tensor::new(vec![3, 4], vec![0.3, -0.1, 0.8, 0.0, 1.0, 0.2, -0.5, 0.4, 0.1, 0.1, 0.1, 0.9])?;
    let probs = teacher_probs(&logits, &Tensor::zeros(vec![4]), 0.07)?;
    let s = g.input(logits)?;
    let ib = ibot_loss(&mut g, s, &probs, &[true, false, true], 0.1)?;
    println!("ibot on two masked rows: {:.6}", g.value(ib.loss).item());

    let pts = g.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?)?;
    let k = koleo_loss(&mut g, pts, 0.0)?;
    println!("koleo, two orthogonal points: {:.6} (−log √2 = {:.6})", g.value(k).item(), -(2f64.sqrt()).ln());

    let xs = g.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?)?;
    let xg = g.input(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0])?)?;
    let gr = gram_loss(&mut g, xs, xg)?;
    println!("gram, orthonormal vs swapped: {:.6}", g.value(gr).item());

    let early = LossParts { dino: 1.0, ibot: 1.0, koleo: 1.0, gram: None };
    println!("stage 1 total with unit parts: {}", stage_loss(1, &early, 0.1)?);
    let late = LossParts { gram: Some(1.0), ..early };
    for stage in 2..=3 {
        println!("stage {stage} total with unit parts: {}", stage_loss(stage, &late, 0.1)?);
    }
    Ok(())
}
