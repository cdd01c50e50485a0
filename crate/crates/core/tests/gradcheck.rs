#[path = "support/gradients.rs"]
mod gradients;

#[test]
fn matmul_and_bmm() {
    gradients::matmul_and_bmm();
}

#[test]
fn shape_ops() {
    gradients::shape_ops();
}

#[test]
fn elementwise_binary() {
    gradients::elementwise_binary();
}

#[test]
fn elementwise_unary() {
    gradients::elementwise_unary();
}

#[test]
fn reductions() {
    gradients::reductions();
}

#[test]
fn softmax_family() {
    gradients::softmax_family();
}

#[test]
fn dropout_with_fixed_mask() {
    gradients::dropout_with_fixed_mask();
}

#[test]
fn layer_norm_and_cosine() {
    gradients::layer_norm_and_cosine();
}

#[test]
fn semi_tensor_product() {
    gradients::semi_tensor_product();
}

#[test]
fn codec_pieces() {
    gradients::codec_pieces();
}

#[test]
fn distillation_terms() {
    gradients::distillation_terms();
}

#[test]
fn encoder_pool_and_contrastive() {
    gradients::encoder_pool_and_contrastive();
}

#[test]
fn total_loss_end_to_end_three_items() {
    gradients::total_loss_end_to_end_three_items();
}
