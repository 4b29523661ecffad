/// Library operation to the subcommand that exposes it.
pub const OP_TABLE: &[(&str, &str)] = &[
    ("tensor::write_tensor", "convert"),
    ("tensor::read_tensor", "inspect"),
    ("preshape::reshape_to_landmarks", "landmarks"),
    ("preshape::project", "project"),
    ("preshape::geodesic_distance", "gdist"),
    ("geodesic::curve_point", "curve"),
    ("geodesic::surface_point", "surface"),
    ("geodesic::generate_weight_sets", "weights"),
    ("geodesic::augment", "augment"),
    ("swc::plan", "swc-plan"),
    ("swc::extract", "swc-extract"),
    ("styleloss::loss_pc", "loss pc"),
    ("styleloss::loss_pd", "loss pd"),
    ("styleloss::loss_style", "loss style"),
    ("contentloss::self_correlation", "selfcorr"),
    ("contentloss::loss_psc", "loss psc"),
    ("contentloss::loss_mse", "loss mse"),
    ("contentloss::loss_feature_mse", "loss vgg"),
    ("contentloss::loss_patch_contrastive", "loss zecon"),
    ("contentloss::loss_content", "loss content"),
    ("grad::grad_eval", "grad"),
    ("grad::fd_check", "gradcheck"),
    ("diffusion::build_schedule", "schedule"),
    ("diffusion::q_sample", "q-sample"),
    ("diffusion::denoised_estimate", "denoise"),
    ("diffusion::ddim_invert", "invert"),
    ("diffusion::guided_step", "step"),
    ("diffusion::sample_loop", "guide"),
    ("diffusion::toy_predictor", "toy-predict"),
    ("metrics::psnr", "metrics psnr"),
    ("metrics::ssim", "metrics ssim"),
    ("metrics::clip_i", "metrics clip-i"),
    ("metrics::clip_p", "metrics clip-p"),
];
