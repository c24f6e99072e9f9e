//! Round-trip identities for both camera models and group laws for poses.
//!
//! The camera tests sweep a 64x64 grid of pixel positions over the image,
//! keep the in-FOV ones, and require project(unproject(px)) to land back
//! on px within 1e-9. The only approximate step in the chain is the Newton
//! inversion of the fisheye radial polynomial, whose residual tolerance
//! (1e-12 on rho) leaves orders of magnitude of headroom.
//!
//! Pose laws are property tests over random rotations (Euler-composed) and
//! translations: identity, inverse, associativity, action compatibility.

use fisheyemod::geometry::{
    Camera, FisheyeIntrinsics, Pixel, Point3, Pose, RectilinearIntrinsics,
};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn fisheye() -> FisheyeIntrinsics {
    FisheyeIntrinsics::new(640, 480, 322.0, 236.5, 260.0, -24.0, 3.5, -0.6, 1.65).unwrap()
}

fn rectilinear() -> RectilinearIntrinsics {
    RectilinearIntrinsics::new(640, 480, 420.0, 415.0, 321.5, 239.0).unwrap()
}

/// 64x64 grid of pixel positions spanning the image interior.
fn pixel_grid(width: u32, height: u32) -> Vec<Pixel> {
    let mut grid = Vec::with_capacity(64 * 64);
    for i in 0..64 {
        for j in 0..64 {
            let u = (i as f64 + 0.5) / 64.0 * width as f64;
            let v = (j as f64 + 0.5) / 64.0 * height as f64;
            grid.push(Pixel::new(u, v));
        }
    }
    grid
}

#[test]
fn fisheye_project_unproject_identity_on_in_fov_grid() {
    let intr = fisheye();
    let cam = Camera::Fisheye(intr.clone());
    let r_max = intr.rho_max();
    let mut tested = 0;
    for px in pixel_grid(intr.width, intr.height) {
        let r = ((px.u - intr.cx).powi(2) + (px.v - intr.cy).powi(2)).sqrt();
        if r > 0.999 * r_max {
            continue;
        }
        let ray = cam.unproject(&px).unwrap();
        assert!((ray.norm() - 1.0).abs() < TOL, "unprojected ray is not unit length");
        let back = cam.project(&ray).unwrap();
        let err = ((back.u - px.u).powi(2) + (back.v - px.v).powi(2)).sqrt();
        assert!(
            err < TOL,
            "pixel ({}, {}) came back as ({}, {}), error {err:e}",
            px.u,
            px.v,
            back.u,
            back.v
        );
        tested += 1;
    }
    // The image circle covers most of this sensor; the grid must not
    // degenerate to a handful of points.
    assert!(tested > 2048, "only {tested} grid points were in FOV");
}

#[test]
fn rectilinear_project_unproject_identity_on_grid() {
    let intr = rectilinear();
    let cam = Camera::Rectilinear(intr.clone());
    for px in pixel_grid(intr.width, intr.height) {
        let ray = cam.unproject(&px).unwrap();
        assert!((ray.norm() - 1.0).abs() < TOL);
        let back = cam.project(&ray).unwrap();
        let err = ((back.u - px.u).powi(2) + (back.v - px.v).powi(2)).sqrt();
        assert!(err < TOL, "pixel ({}, {}) error {err:e}", px.u, px.v);
    }
}

#[test]
fn fisheye_unproject_project_identity_on_ray_grid() {
    let intr = fisheye();
    let cam = Camera::Fisheye(intr);
    for i in 0..64 {
        let theta = (i as f64 + 0.5) / 64.0 * 0.999 * 1.65;
        for j in 0..64 {
            let phi = (j as f64 + 0.5) / 64.0 * std::f64::consts::TAU;
            let ray = Point3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            );
            let px = cam.project(&ray).unwrap();
            let back = cam.unproject(&px).unwrap();
            assert!(
                (back - ray).norm() < TOL,
                "ray at theta {theta} phi {phi} came back {:e} away",
                (back - ray).norm()
            );
        }
    }
}

#[test]
fn projection_is_scale_invariant_along_the_ray() {
    let cam = Camera::Fisheye(fisheye());
    let ray = Point3::new(0.3, -0.2, 0.8);
    let near = cam.project(&ray).unwrap();
    let far = cam.project(&(ray * 37.5)).unwrap();
    assert!((near.u - far.u).abs() < TOL && (near.v - far.v).abs() < TOL);
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    let angle = -std::f64::consts::PI..std::f64::consts::PI;
    let shift = -50.0..50.0f64;
    (angle.clone(), angle.clone(), angle, shift.clone(), shift.clone(), shift).prop_map(
        |(roll, pitch, yaw, x, y, z)| {
            let rot = Rotation3::from_euler_angles(roll, pitch, yaw);
            Pose::new(*rot.matrix(), Vector3::new(x, y, z)).unwrap()
        },
    )
}

fn point_strategy() -> impl Strategy<Value = Point3> {
    let c = -100.0..100.0f64;
    (c.clone(), c.clone(), c).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn poses_close(a: &Pose, b: &Pose) -> bool {
    let dr = (a.rotation() - b.rotation()).abs().max();
    let dt = (a.translation() - b.translation()).norm();
    dr < TOL && dt < TOL
}

proptest! {
    #[test]
    fn identity_is_neutral(a in pose_strategy()) {
        prop_assert!(poses_close(&a.compose(&Pose::identity()), &a));
        prop_assert!(poses_close(&Pose::identity().compose(&a), &a));
    }

    #[test]
    fn inverse_cancels(a in pose_strategy()) {
        prop_assert!(poses_close(&a.compose(&a.invert()), &Pose::identity()));
        prop_assert!(poses_close(&a.invert().compose(&a), &Pose::identity()));
        prop_assert!(poses_close(&a.invert().invert(), &a));
    }

    #[test]
    fn composition_is_associative(
        a in pose_strategy(),
        b in pose_strategy(),
        c in pose_strategy(),
    ) {
        prop_assert!(poses_close(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))));
    }

    #[test]
    fn composition_matches_sequential_action(
        a in pose_strategy(),
        b in pose_strategy(),
        p in point_strategy(),
    ) {
        let via_compose = a.compose(&b).transform(&p);
        let sequential = a.transform(&b.transform(&p));
        prop_assert!((via_compose - sequential).norm() < TOL);
    }

    #[test]
    fn transform_round_trips_through_inverse(a in pose_strategy(), p in point_strategy()) {
        prop_assert!((a.invert().transform(&a.transform(&p)) - p).norm() < TOL);
    }

    #[test]
    fn rotation_preserves_length(a in pose_strategy(), p in point_strategy()) {
        prop_assert!((a.rotate(&p).norm() - p.norm()).abs() < TOL * p.norm().max(1.0));
    }
}
