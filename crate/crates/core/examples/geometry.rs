//! How the nine surrogate parameters deform a base window.

use qformer::quad::{basic_transforms, compose_transform, quad_corners};

fn show(label: &str, t: [f64; 9]) {
    let m = compose_transform(&t, 4.0, 4.0);
    let corners = quad_corners(&m, [8.0, 8.0], 4);
    let pts: Vec<String> = corners.iter().map(|c| format!("({:6.2}, {:6.2})", c[0], c[1])).collect();
    println!("{label:<12} {}", pts.join(" "));
}

fn main() {
    println!("4×4 window centred at (8, 8) on a 4×4 window grid\n");
    show("identity", [0.0; 9]);
    show("scale 2×", [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    show("shear", [0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    show("rotate 45°", [0.0, 0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_4, 0.0, 0.0, 0.0, 0.0]);
    show("translate", [0.0, 0.0, 0.0, 0.0, 0.0, 0.25, -0.25, 0.0, 0.0]);
    show("projective", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.15, 0.0]);
    show("combined", [0.3, -0.2, 0.1, 0.05, 0.4, 0.1, 0.0, 0.05, -0.05]);

    println!("\nbasic transforms for the combined case:");
    let names = ["scale", "shear", "rotation", "translation", "projection"];
    for (name, m) in names.iter().zip(basic_transforms(&[0.3, -0.2, 0.1, 0.05, 0.4, 0.1, 0.0, 0.05, -0.05], 4.0, 4.0)) {
        println!("  {name:<11} {:?}", m.map(|r| r.map(|v| (v * 1000.0).round() / 1000.0)));
    }
}
