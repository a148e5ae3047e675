use nalgebra::{Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Vector3};

/// Horn's closed form: the rotation is the eigenvector of the largest
/// eigenvalue of a 4x4 matrix built from the cross-covariance.
pub fn horn(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = est.len() as f64;
    let ce: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let cg: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;
    let mut s = Matrix3::zeros();
    for (a, b) in est.iter().zip(gt) {
        s += (a - ce) * (b - cg).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n4 = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n4);
    let i = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(i);
    let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner();
    (r, cg - r * ce)
}
