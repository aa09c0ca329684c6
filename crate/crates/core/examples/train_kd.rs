//! Trains a ReLU teacher on synthetic data, then two polynomial students:
//! one from hard labels only and one distilled from the teacher.

use beaa::data::{synthetic, Split};
use beaa::model::{build_desk_net, ActivationKind};
use beaa::training::{evaluate, train_student, train_teacher, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut data = synthetic(400, (3, 8, 8), 4, 0.6, 3)?;
    data.normalize();
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 32,
        seed: 3,
        ..Default::default()
    };

    let teacher_spec = build_desk_net(4, (3, 8, 8), ActivationKind::Relu)?;
    let teacher = train_teacher(&teacher_spec, &data, &cfg)?;
    println!(
        "teacher test accuracy {:.3}",
        evaluate(&teacher_spec, &teacher.weights, &data, Split::Test)?
    );

    let student_spec = build_desk_net(4, (3, 8, 8), ActivationKind::parse("poly-element")?)?;
    let plain = train_student(&student_spec, &data, &cfg, None)?;
    let kd = train_student(&student_spec, &data, &cfg, Some((&teacher_spec, &teacher.weights)))?;
    for (name, out) in [("student", &plain), ("student+kd", &kd)] {
        let last = out.metrics.last().expect("at least one epoch");
        println!(
            "{name:10} loss {:.4} (distill {:.4}) test accuracy {:.3}",
            last.total_loss,
            last.distill_loss,
            evaluate(&student_spec, &out.weights, &data, Split::Test)?
        );
    }
    Ok(())
}
