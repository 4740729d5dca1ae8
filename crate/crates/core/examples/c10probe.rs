use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use volreg::cost::CostConfig;
use volreg::points::{Contact, FreeVoxelGrid, Provenance, SemanticPointSet, Workspace};
use volreg::pose::{sample_uniform_pose, PoseParam, RigidTransform};
use volreg::qd::{register, sgd_warm_start, Optimizer, QdConfig};
use volreg::sdf::SdfGrid;

fn main() {
    let t0 = Instant::now();
    let mesh = std::sync::Arc::new(volreg::shapes::l_prism(0.18, 0.06, 0.06, 0.18, 0.06));
    let grid = SdfGrid::build(mesh.clone(), 0.01, 0.05).unwrap();
    eprintln!("grid built {:?}", t0.elapsed());
    let workspace = Workspace::new(
        Vector3::new(-0.1, -0.3, -0.075),
        Vector3::new(0.5, 0.3, 0.625),
    )
    .unwrap();
    let mut free_grid = FreeVoxelGrid::new(0.025, workspace.min()).unwrap();
    free_grid.add_points(&workspace.boundary_free_points(0.025).unwrap(), Provenance::Boundary);
    eprintln!("boundary {} voxels {:?}", free_grid.len(), t0.elapsed());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pose = RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::new(0.2, 0.0, 0.3));
    let mut tries = 0u64;
    while free_grid.len() < 14_970 {
        let batch: Vec<Vector3<f64>> = (0..256)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.1..0.5),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.075..0.625),
                )
            })
            .filter(|p| (p - pose.translation).norm() > 0.2)
            .collect();
        free_grid.add_points(&batch, Provenance::CameraRay);
        tries += 1;
        if tries % 2000 == 0 {
            eprintln!("tries {tries}, voxels {}", free_grid.len());
        }
        if tries > 20000 { eprintln!("STUCK at {}", free_grid.len()); return; }
    }
    eprintln!("free filled {} {:?}", free_grid.len(), t0.elapsed());
    let contacts: Vec<Contact> = mesh
        .sample_surface(30, &mut rng)
        .into_iter()
        .map(|s| Contact { position: pose.apply(&s), value: 0.0, provenance: Provenance::Probe(0) })
        .collect();
    let x = SemanticPointSet::assemble(&free_grid, &contacts, &[]);
    eprintln!("|X| = {} {:?}", x.len(), t0.elapsed());

    let qd = QdConfig::default();
    let starts: Vec<PoseParam> = (0..30).map(|_| sample_uniform_pose(&workspace, &mut rng)).collect();
    let t1 = Instant::now();
    let warm = sgd_warm_start(&x, &starts, &grid, &CostConfig::default(), &qd);
    eprintln!("warm start {:?} (best {:.4})", t1.elapsed(),
        warm.iter().map(|(_, c)| *c).fold(f64::INFINITY, f64::min));
    let t2 = Instant::now();
    let mut rng2 = ChaCha8Rng::seed_from_u64(11);
    let out = register(&x, &starts, &[], &grid, &CostConfig::default(), &qd, Optimizer::CmaMega, &workspace, &mut rng2).unwrap();
    eprintln!("full register {:?} ({} estimates)", t2.elapsed(), out.estimates.estimates.len());
}
