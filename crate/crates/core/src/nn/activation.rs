pub fn relu(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// `dy` masked by the (post-activation) output.
pub fn relu_backward(out: &[f32], dy: &mut [f32]) {
    for (g, &y) in dy.iter_mut().zip(out) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn leaky_relu(x: &mut [f32], slope: f32) {
    for v in x {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Works from the output since `slope > 0` preserves the sign.
pub fn leaky_relu_backward(out: &[f32], dy: &mut [f32], slope: f32) {
    for (g, &y) in dy.iter_mut().zip(out) {
        if y < 0.0 {
            *g *= slope;
        }
    }
}

pub fn tanh(x: &mut [f32]) {
    for v in x {
        *v = v.tanh();
    }
}

pub fn tanh_backward(out: &[f32], dy: &mut [f32]) {
    for (g, &y) in dy.iter_mut().zip(out) {
        *g *= 1.0 - y * y;
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
