//! Slices a redundant pose frame into its named groups.

use b2a_hdm::autodiff::Tensor;
use b2a_hdm::dataset::{MotionSequence, RedundantPoseLayout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for layout in [RedundantPoseLayout::HUMANML3D, RedundantPoseLayout::KIT_ML] {
        let w = layout.width();
        let frames = Tensor::from_fn(&[2, w], |i| (i % w) as f64);
        let seq = MotionSequence {
            frames,
            label: None,
            fps: 20.0,
        };
        let f = layout.frame(&seq, 1);
        println!("{} joints -> width {w}", layout.joints());
        println!(
            "  root angular velocity {:?}",
            layout.root_angular_velocity()
        );
        println!(
            "  root linear velocity  {:?}",
            layout.root_linear_velocity()
        );
        println!("  root height           {:?}", layout.root_height());
        println!("  joint positions       {:?}", layout.joint_positions());
        println!("  joint rotations       {:?}", layout.joint_rotations());
        println!("  joint velocities      {:?}", layout.joint_velocities());
        println!(
            "  foot contacts         {:?} = {:?}",
            layout.foot_contacts(),
            f.foot_contacts()
        );
        println!("  frame 1 root height {}", f.root_height());
    }
    Ok(())
}
