mod common;

use common::grad_suite;

#[test]
fn elementwise_binary() {
    grad_suite::elementwise_binary();
}

#[test]
fn elementwise_unary() {
    grad_suite::elementwise_unary();
}

#[test]
fn reductions_and_normalisers() {
    grad_suite::reductions_and_normalisers();
}

#[test]
fn shape_ops() {
    grad_suite::shape_ops();
}

#[test]
fn linear_algebra() {
    grad_suite::linear_algebra();
}

#[test]
fn attention_prior() {
    grad_suite::attention_prior();
}

#[test]
fn inter_fusion_stack() {
    grad_suite::inter_fusion_stack();
}

#[test]
fn intra_fusion_stack() {
    grad_suite::intra_fusion_stack();
}

#[test]
fn head_with_losses() {
    grad_suite::head_with_losses();
}

#[test]
fn video_classifier() {
    grad_suite::video_classifier();
}

#[test]
fn backbone() {
    grad_suite::backbone();
}
