//! Mixed channel-then-spatial attention for 3D feature maps.

use digest_nn::param::{he_uniform, uniform};
use digest_nn::{Graph, ParamStore, Result, Tensor, Var};

use super::BoundParams;

/// Starting bias of the bottleneck units. Pooled descriptors are mostly
/// positive, so with a zero bias a unit whose weights sum negative starts
/// dead and stays dead.
pub const FC1_BIAS_INIT: f32 = 1.0;

fn linear_bound(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

/// Hidden width of the shared channel-attention bottleneck.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

pub(crate) fn init_params(
    params: &mut ParamStore,
    prefix: &str,
    channels: usize,
    reduction: usize,
    kernel: usize,
    seed: u64,
) {
    let hidden = hidden_width(channels, reduction);
    let name = |s: &str| format!("{prefix}.{s}");
    params.insert(
        name("fc1.weight"),
        uniform(
            &[hidden, channels, 1, 1, 1],
            linear_bound(channels),
            seed,
            &name("fc1.weight"),
        ),
    );
    params.insert(name("fc1.bias"), Tensor::full(&[hidden], FC1_BIAS_INIT));
    params.insert(
        name("fc2.weight"),
        uniform(
            &[channels, hidden, 1, 1, 1],
            linear_bound(hidden),
            seed,
            &name("fc2.weight"),
        ),
    );
    params.insert(name("fc2.bias"), Tensor::zeros(&[channels]));
    let fan = 2 * kernel * kernel * kernel;
    params.insert(
        name("spatial.weight"),
        he_uniform(&[1, 2, kernel, kernel, kernel], fan, seed, &name("spatial.weight")),
    );
    params.insert(name("spatial.bias"), Tensor::zeros(&[1]));
}

/// Graph handles of one attention application.
#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    pub output: Var,
    /// `B × C × 1 × 1 × 1`, values in (0, 1).
    pub channel_attention: Var,
    /// `B × 1 × D × H × W`, values in (0, 1).
    pub spatial_attention: Var,
}

/// `features × Mc × Ms`: channel attention from average- and max-pooled
/// descriptors through a shared two-layer bottleneck, then spatial attention
/// from channelwise average and max maps through one convolution.
pub fn apply(g: &mut Graph, features: Var, p: &BoundParams, prefix: &str) -> Result<CbamVars> {
    let w = |s: &str| p.get(&format!("{prefix}.{s}"));
    let mlp = |g: &mut Graph, x: Var| -> Result<Var> {
        let h = g.conv3d(x, w("fc1.weight"), Some(w("fc1.bias")))?;
        let h = g.relu(h);
        g.conv3d(h, w("fc2.weight"), Some(w("fc2.bias")))
    };
    let avg = g.global_avg_pool(features)?;
    let max = g.global_max_pool(features)?;
    let a = mlp(g, avg)?;
    let m = mlp(g, max)?;
    let logits = g.add(a, m)?;
    let channel_attention = g.sigmoid(logits);
    let refined = g.scale_channels(features, channel_attention)?;

    let cmean = g.channel_mean(refined)?;
    let cmax = g.channel_max(refined)?;
    let desc = g.concat(cmean, cmax)?;
    let s = g.conv3d(desc, w("spatial.weight"), Some(w("spatial.bias")))?;
    let spatial_attention = g.sigmoid(s);
    let output = g.scale_spatial(refined, spatial_attention)?;
    Ok(CbamVars {
        output,
        channel_attention,
        spatial_attention,
    })
}
