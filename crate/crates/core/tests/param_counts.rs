//! Parameter counts of the reference backbones (single-channel stem, no classifier).
//!
//! The full-profile counts are the torchvision `resnet18`/`resnet50` totals
//! with `conv1` rebuilt for one input channel and `fc` removed.

use attnage::{Backbone32, BackboneConfig, Profile, Variant};

fn count(profile: Profile, variant: Variant) -> usize {
    Backbone32::new(BackboneConfig::for_profile(profile, variant), 0).unwrap().num_params()
}

#[test]
fn full_resnet18_matches_torchvision() {
    assert_eq!(count(Profile::Full, Variant::ResNet18), 11_170_240);
}

#[test]
fn full_resnet50_matches_torchvision() {
    assert_eq!(count(Profile::Full, Variant::ResNet50), 23_501_760);
}

#[test]
fn desk_resnet18_fits_the_budget() {
    let n = count(Profile::Desk, Variant::ResNet18);
    assert_eq!(n, 699_888);
    assert!(n < 1_500_000);
}
