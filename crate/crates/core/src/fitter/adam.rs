use crate::state::ParamGroup;

/// Adam with one learning rate per parameter group. Frozen parameters are
/// never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: Vec<f64>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(groups: &[ParamGroup], lr_pose: f64, lr_translation_scale: f64, betas: [f64; 2], epsilon: f64) -> Self {
        let lr = groups
            .iter()
            .map(|g| match g {
                ParamGroup::Pose => lr_pose,
                ParamGroup::TranslationScale => lr_translation_scale,
                ParamGroup::Frozen => 0.0,
            })
            .collect::<Vec<_>>();
        let n = lr.len();
        Self {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if self.lr[i] == 0.0 {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr[i] * mh / (vh.sqrt() + self.epsilon);
        }
    }
}
