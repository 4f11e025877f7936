use lobeseg_nn::gradcheck::{self, GradReport};
use lobeseg_nn::NetworkKind;

const TOL: f64 = 1e-4;
const CASES: usize = 20;

fn assert_ok(r: GradReport) {
    eprintln!("{} cases={} max_rel_error={:e}", r.name, r.cases, r.max_rel_error);
    assert!(r.cases >= 1);
    assert!(r.max_rel_error < TOL, "{}: relative error {:e}", r.name, r.max_rel_error);
}

#[test]
fn conv3() {
    assert_ok(gradcheck::check_conv3(CASES, 11));
}

#[test]
fn conv1() {
    assert_ok(gradcheck::check_conv1(CASES, 12));
}

#[test]
fn relu() {
    assert_ok(gradcheck::check_relu(CASES, 13));
}

#[test]
fn batchnorm() {
    assert_ok(gradcheck::check_batchnorm(CASES, 14));
}

#[test]
fn dropout() {
    assert_ok(gradcheck::check_dropout(CASES, 15));
}

#[test]
fn softmax() {
    assert_ok(gradcheck::check_softmax(CASES, 16));
}

#[test]
fn concat_split() {
    assert_ok(gradcheck::check_concat(CASES, 17));
}

#[test]
fn block_average_downsample() {
    assert_ok(gradcheck::check_downsample(CASES, 18));
}

#[test]
fn linear_upsample() {
    assert_ok(gradcheck::check_upsample(CASES, 19));
}

#[test]
fn dice_bce_loss() {
    assert_ok(gradcheck::check_loss(CASES, 20));
}

#[test]
fn whole_networks() {
    for seed in 0..3 {
        assert_ok(gradcheck::check_network(NetworkKind::Dpn, 30 + seed));
        assert_ok(gradcheck::check_network(NetworkKind::Unet, 40 + seed));
    }
}
