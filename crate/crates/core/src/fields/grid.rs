use crate::scalar::Real;
use crate::tensor::Tensor;

use super::{FieldError, VariableId};

/// One 2-D gridded variable at a single resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    var: VariableId,
    ny: usize,
    nx: usize,
    spacing_m: f64,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(
        var: VariableId,
        ny: usize,
        nx: usize,
        spacing_m: f64,
        values: Vec<f64>,
    ) -> Result<Self, FieldError> {
        if ny == 0 || nx == 0 {
            return Err(FieldError::InvalidGrid(format!("empty grid {ny}x{nx}")));
        }
        if values.len() != ny * nx {
            return Err(FieldError::InvalidGrid(format!(
                "{var}: {} values for a {ny}x{nx} grid",
                values.len()
            )));
        }
        if !(spacing_m > 0.0) {
            return Err(FieldError::InvalidGrid(format!("spacing {spacing_m} m")));
        }
        Ok(Self {
            var,
            ny,
            nx,
            spacing_m,
            values,
        })
    }

    pub fn var(&self) -> VariableId {
        self.var
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn spacing_m(&self) -> f64 {
        self.spacing_m
    }

    pub fn spacing_km(&self) -> f64 {
        self.spacing_m / 1000.0
    }

    pub fn units(&self) -> &'static str {
        self.var.units()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.nx + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Precipitation must be non-negative; every other variable is unconstrained.
    pub fn check_physical(&self) -> Result<(), FieldError> {
        if self.var == VariableId::Pr && self.values.iter().any(|&v| v < 0.0) {
            return Err(FieldError::InvalidGrid("negative precipitation".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::InvalidGrid(format!("{}: non-finite value", self.var)));
        }
        Ok(())
    }

    /// Area-mean coarsening: each coarse cell is the mean of its `factor²` block.
    pub fn coarsen(&self, factor: usize) -> Result<Self, FieldError> {
        if factor == 0 || !self.ny.is_multiple_of(factor) || !self.nx.is_multiple_of(factor) {
            return Err(FieldError::NotDivisible {
                ny: self.ny,
                nx: self.nx,
                factor,
            });
        }
        let (cy, cx) = (self.ny / factor, self.nx / factor);
        let mut sums = vec![0.0; cy * cx];
        for y in 0..self.ny {
            let row = &self.values[y * self.nx..(y + 1) * self.nx];
            let dst = &mut sums[(y / factor) * cx..(y / factor + 1) * cx];
            for (x, &v) in row.iter().enumerate() {
                dst[x / factor] += v;
            }
        }
        let norm = 1.0 / (factor * factor) as f64;
        sums.iter_mut().for_each(|v| *v *= norm);
        Self::new(self.var, cy, cx, self.spacing_m * factor as f64, sums)
    }
}

/// Co-registered multi-variable stack in canonical channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    fields: Vec<GridField>,
}

impl FieldStack {
    pub fn new(fields: Vec<GridField>) -> Result<Self, FieldError> {
        let first = fields
            .first()
            .ok_or_else(|| FieldError::InvalidGrid("empty field stack".into()))?;
        for f in &fields[1..] {
            if f.ny != first.ny || f.nx != first.nx || f.spacing_m != first.spacing_m {
                return Err(FieldError::NotCoRegistered(format!(
                    "{} is {}x{} @ {} m, {} is {}x{} @ {} m",
                    first.var, first.ny, first.nx, first.spacing_m, f.var, f.ny, f.nx, f.spacing_m
                )));
            }
        }
        if !fields.windows(2).all(|w| w[0].var < w[1].var) {
            return Err(FieldError::InvalidGrid(
                "channels must be unique and in canonical order".into(),
            ));
        }
        Ok(Self { fields })
    }

    /// Builds a stack from a `[C, H, W]` tensor; `vars` names the channels.
    pub fn from_tensor<R: Real>(
        vars: &[VariableId],
        spacing_m: f64,
        t: &Tensor<R>,
    ) -> Result<Self, FieldError> {
        let &[c, h, w] = t.shape() else {
            return Err(FieldError::InvalidGrid(format!(
                "expected [C, H, W] tensor, got {:?}",
                t.shape()
            )));
        };
        if c != vars.len() {
            return Err(FieldError::InvalidGrid(format!(
                "{c} channels for {} variables",
                vars.len()
            )));
        }
        let fields = vars
            .iter()
            .zip(t.data().chunks(h * w))
            .map(|(&v, plane)| {
                GridField::new(v, h, w, spacing_m, plane.iter().map(|x| x.to_f64_lossy()).collect())
            })
            .collect::<Result<_, _>>()?;
        Self::new(fields)
    }

    pub fn fields(&self) -> &[GridField] {
        &self.fields
    }

    pub fn into_fields(self) -> Vec<GridField> {
        self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn ny(&self) -> usize {
        self.fields[0].ny
    }

    pub fn nx(&self) -> usize {
        self.fields[0].nx
    }

    pub fn spacing_m(&self) -> f64 {
        self.fields[0].spacing_m
    }

    pub fn variables(&self) -> Vec<VariableId> {
        self.fields.iter().map(|f| f.var).collect()
    }

    pub fn field(&self, var: VariableId) -> Option<&GridField> {
        self.fields.iter().find(|f| f.var == var)
    }

    /// Restricts the stack to `vars` (which must all be present).
    pub fn select(&self, vars: &[VariableId]) -> Result<Self, FieldError> {
        let fields = vars
            .iter()
            .map(|v| {
                self.field(*v)
                    .cloned()
                    .ok_or_else(|| FieldError::UnknownVariable(format!("{v} not in stack")))
            })
            .collect::<Result<_, _>>()?;
        Self::new(fields)
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self, FieldError> {
        Self::new(
            self.fields
                .iter()
                .map(|f| f.coarsen(factor))
                .collect::<Result<_, _>>()?,
        )
    }

    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let data = self
            .fields
            .iter()
            .flat_map(|f| f.values.iter().map(|&v| R::lit(v)))
            .collect();
        Tensor::new(&[self.len(), self.ny(), self.nx()], data).expect("validated stack")
    }

    /// Clamps precipitation to be non-negative (used on model output).
    pub fn clamp_physical(mut self) -> Self {
        for f in &mut self.fields {
            if f.var == VariableId::Pr {
                f.values.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        self
    }

    pub fn map_values(&self, mut f: impl FnMut(VariableId, f64) -> f64) -> Self {
        let fields = self
            .fields
            .iter()
            .map(|g| GridField {
                values: g.values.iter().map(|&v| f(g.var, v)).collect(),
                ..g.clone()
            })
            .collect();
        Self { fields }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(ny: usize, nx: usize, values: Vec<f64>) -> GridField {
        GridField::new(VariableId::T2m, ny, nx, 25_000.0, values).unwrap()
    }

    #[test]
    fn coarsen_block_mean_example() {
        let f = field(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let c = f.coarsen(2).unwrap();
        assert_eq!(c.values(), &[2.5]);
        assert_eq!(c.spacing_km(), 50.0);
    }

    #[test]
    fn coarsen_constant_is_constant() {
        for s in [1, 2, 4] {
            let c = field(8, 8, vec![7.25; 64]).coarsen(s).unwrap();
            assert!(c.values().iter().all(|&v| v == 7.25));
        }
    }

    #[test]
    fn coarsen_rejects_indivisible() {
        let err = field(3, 4, vec![0.0; 12]).coarsen(2).unwrap_err();
        assert!(matches!(err, FieldError::NotDivisible { ny: 3, nx: 4, factor: 2 }));
    }

    #[test]
    fn stack_requires_co_registration_and_order() {
        let a = GridField::new(VariableId::U10, 2, 2, 1.0, vec![0.0; 4]).unwrap();
        let b = GridField::new(VariableId::V10, 2, 4, 1.0, vec![0.0; 8]).unwrap();
        assert!(matches!(
            FieldStack::new(vec![a.clone(), b]),
            Err(FieldError::NotCoRegistered(_))
        ));
        let b = GridField::new(VariableId::V10, 2, 2, 1.0, vec![0.0; 4]).unwrap();
        assert!(FieldStack::new(vec![b.clone(), a.clone()]).is_err());
        let s = FieldStack::new(vec![a, b]).unwrap();
        let t = s.to_tensor::<f64>();
        assert_eq!(t.shape(), &[2, 2, 2]);
        let back = FieldStack::from_tensor(&s.variables(), s.spacing_m(), &t).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn negative_precipitation_is_unphysical() {
        let pr = GridField::new(VariableId::Pr, 1, 2, 1.0, vec![0.0, -1.0]).unwrap();
        assert!(pr.check_physical().is_err());
        let s = FieldStack::new(vec![pr]).unwrap().clamp_physical();
        assert!(s.fields()[0].check_physical().is_ok());
    }

    proptest! {
        #[test]
        fn coarsen_preserves_mean(values in proptest::collection::vec(-10f64..10.0, 64)) {
            let f = field(8, 8, values);
            let c = f.coarsen(2).unwrap();
            prop_assert!((c.mean() - f.mean()).abs() < 1e-12);
        }

        #[test]
        fn coarsen_composes(values in proptest::collection::vec(-10f64..10.0, 64)) {
            let f = field(8, 8, values);
            let twice = f.coarsen(2).unwrap().coarsen(2).unwrap();
            let once = f.coarsen(4).unwrap();
            for (a, b) in twice.values().iter().zip(once.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
