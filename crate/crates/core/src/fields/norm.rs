use super::{FieldError, FieldStack, VariableId};

/// Per-variable standardisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    vars: Vec<VariableId>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormStats {
    pub fn new(vars: Vec<VariableId>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self, FieldError> {
        if vars.len() != mean.len() || vars.len() != std.len() {
            return Err(FieldError::Malformed("norm stats length mismatch".into()));
        }
        if let Some((v, _)) = vars.iter().zip(&std).find(|(_, s)| !(**s > 0.0)) {
            return Err(FieldError::ZeroVariance(v.name()));
        }
        Ok(Self { vars, mean, std })
    }

    /// Pooled mean and population standard deviation over every cell of
    /// every stack.
    pub fn fit(stacks: &[FieldStack]) -> Result<Self, FieldError> {
        let first = stacks
            .first()
            .ok_or_else(|| FieldError::InvalidGrid("no stacks to fit".into()))?;
        let vars = first.variables();
        let mut mean = Vec::with_capacity(vars.len());
        let mut std = Vec::with_capacity(vars.len());
        for (c, var) in vars.iter().enumerate() {
            let planes: Vec<&[f64]> = stacks
                .iter()
                .map(|s| {
                    s.fields()
                        .get(c)
                        .filter(|f| f.var() == *var)
                        .map(|f| f.values())
                        .ok_or_else(|| FieldError::NotCoRegistered(format!("{var} missing")))
                })
                .collect::<Result<_, _>>()?;
            let n: usize = planes.iter().map(|p| p.len()).sum();
            let m = planes.iter().flat_map(|p| p.iter()).sum::<f64>() / n as f64;
            let var_ = planes
                .iter()
                .flat_map(|p| p.iter())
                .map(|v| (v - m) * (v - m))
                .sum::<f64>()
                / n as f64;
            mean.push(m);
            std.push(var_.sqrt());
        }
        Self::new(vars, mean, std)
    }

    pub fn variables(&self) -> &[VariableId] {
        &self.vars
    }

    pub fn means(&self) -> &[f64] {
        &self.mean
    }

    pub fn stds(&self) -> &[f64] {
        &self.std
    }

    fn position(&self, var: VariableId) -> Result<usize, FieldError> {
        self.vars
            .iter()
            .position(|v| *v == var)
            .ok_or_else(|| FieldError::UnknownVariable(format!("{var} has no norm stats")))
    }

    pub fn mean_of(&self, var: VariableId) -> Result<f64, FieldError> {
        Ok(self.mean[self.position(var)?])
    }

    pub fn std_of(&self, var: VariableId) -> Result<f64, FieldError> {
        Ok(self.std[self.position(var)?])
    }

    pub fn select(&self, vars: &[VariableId]) -> Result<Self, FieldError> {
        let idx = vars
            .iter()
            .map(|v| self.position(*v))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            vars.to_vec(),
            idx.iter().map(|&i| self.mean[i]).collect(),
            idx.iter().map(|&i| self.std[i]).collect(),
        )
    }

    fn check_covers(&self, stack: &FieldStack) -> Result<(), FieldError> {
        for v in stack.variables() {
            self.position(v)?;
        }
        Ok(())
    }

    pub fn apply(&self, stack: &FieldStack) -> Result<FieldStack, FieldError> {
        self.check_covers(stack)?;
        Ok(stack.map_values(|var, x| {
            let i = self.position(var).expect("checked");
            (x - self.mean[i]) / self.std[i]
        }))
    }

    pub fn invert(&self, stack: &FieldStack) -> Result<FieldStack, FieldError> {
        self.check_covers(stack)?;
        Ok(stack.map_values(|var, x| {
            let i = self.position(var).expect("checked");
            x * self.std[i] + self.mean[i]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{synth_stack, GridField, SynthProfile};

    #[test]
    fn constant_field_has_zero_variance() {
        let f = GridField::new(VariableId::T2m, 2, 2, 1.0, vec![280.0; 4]).unwrap();
        let s = FieldStack::new(vec![f]).unwrap();
        match NormStats::fit(&[s]) {
            Err(FieldError::ZeroVariance(name)) => assert_eq!(name, "t2m"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_and_standardised_moments() {
        let profile = SynthProfile::default_profile();
        let stacks: Vec<_> = (0..3).map(|s| synth_stack(16, 16, s, &profile).unwrap()).collect();
        let stats = NormStats::fit(&stacks).unwrap();
        let normed: Vec<_> = stacks.iter().map(|s| stats.apply(s).unwrap()).collect();
        for c in 0..19 {
            let all: Vec<f64> = normed
                .iter()
                .flat_map(|s| s.fields()[c].values().iter().copied())
                .collect();
            let m = all.iter().sum::<f64>() / all.len() as f64;
            let v = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64;
            assert!(m.abs() < 1e-9, "{m}");
            assert!((v - 1.0).abs() < 1e-9);
        }
        for (orig, n) in stacks.iter().zip(&normed) {
            let back = stats.invert(n).unwrap();
            for (a, b) in orig.fields().iter().zip(back.fields()) {
                for (x, y) in a.values().iter().zip(b.values()) {
                    assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
                }
            }
        }
    }
}
