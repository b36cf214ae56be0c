//! Clinical-variable schema and per-subject tabular records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum VarKind {
    Numerical,
    /// Ordered level names; a value is an index into this list.
    Categorical(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    /// Relative level frequencies used by the synthetic generator (empty for
    /// numerical variables).
    pub weights: Vec<f64>,
}

impl Variable {
    pub fn numerical(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: VarKind::Numerical,
            weights: Vec::new(),
        }
    }

    pub fn categorical(name: &str, levels: &[(&str, f64)]) -> Self {
        Self {
            name: name.into(),
            kind: VarKind::Categorical(levels.iter().map(|(l, _)| l.to_string()).collect()),
            weights: levels.iter().map(|&(_, w)| w).collect(),
        }
    }

    /// Number of levels for a categorical variable, `None` for numerical.
    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            VarKind::Numerical => None,
            VarKind::Categorical(l) => Some(l.len()),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.kind, VarKind::Numerical)
    }

    /// Output width of this variable's reconstruction head: one value for
    /// numerical and binary variables, one logit per level otherwise.
    pub fn head_width(&self) -> usize {
        match self.cardinality() {
            None | Some(2) => 1,
            Some(k) => k,
        }
    }

    pub fn level_index(&self, level: &str) -> Option<usize> {
        match &self.kind {
            VarKind::Numerical => None,
            VarKind::Categorical(l) => l.iter().position(|x| x == level),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub variables: Vec<Variable>,
}

pub const NUMERICAL_NAMES: [&str; 13] = [
    "age", "height", "weight", "bmi", "alp", "alt", "ast", "ldh", "ca", "sc", "nlr", "plr", "ici_cycles",
];

impl TabularSchema {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        for (i, v) in variables.iter().enumerate() {
            if variables[..i].iter().any(|u| u.name == v.name) {
                return Err(Error::Config(format!("duplicate variable name {:?}", v.name)));
            }
            if let Some(k) = v.cardinality() {
                if k < 2 {
                    return Err(Error::Config(format!("variable {:?} needs at least two levels", v.name)));
                }
                if v.weights.len() != k {
                    return Err(Error::Config(format!("variable {:?} has {} weights for {k} levels", v.name, v.weights.len())));
                }
            }
        }
        if variables.is_empty() {
            return Err(Error::Config("schema needs at least one variable".into()));
        }
        Ok(Self { variables })
    }

    /// The 13 numerical and 9 categorical variables of the reference cohort,
    /// with categorical level counts used as generator marginals.
    pub fn default_schema() -> Self {
        let mut vars: Vec<Variable> = NUMERICAL_NAMES.iter().map(|n| Variable::numerical(n)).collect();
        vars.extend([
            Variable::categorical("sex", &[("male", 1796.0), ("female", 332.0)]),
            Variable::categorical("stage", &[("stage3", 780.0), ("stage4", 1332.0)]),
            Variable::categorical("pathology", &[("ad", 897.0), ("scc", 1040.0), ("other", 190.0)]),
            Variable::categorical("diabetes", &[("yes", 208.0), ("no", 1920.0)]),
            Variable::categorical("hypertension", &[("yes", 527.0), ("no", 1599.0)]),
            Variable::categorical("smoking", &[("yes", 1134.0), ("no", 842.0)]),
            Variable::categorical("drinking", &[("yes", 512.0), ("no", 1388.0)]),
            Variable::categorical("hyperlipidemia", &[("yes", 437.0), ("no", 1568.0)]),
            Variable::categorical("response", &[("sd", 1037.0), ("pd", 392.0), ("pr", 699.0)]),
        ]);
        Self::new(vars).expect("default schema is valid")
    }

    pub fn d_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Indices of numerical variables, in schema order.
    pub fn numerical(&self) -> Vec<usize> {
        (0..self.d_vars()).filter(|&j| self.variables[j].is_numerical()).collect()
    }

    pub fn categorical(&self) -> Vec<usize> {
        (0..self.d_vars()).filter(|&j| !self.variables[j].is_numerical()).collect()
    }

    /// Checks that a record has one value of the right kind per variable.
    pub fn validate(&self, rec: &TabularRecord) -> Result<()> {
        if rec.values.len() != self.d_vars() {
            return Err(Error::Data(format!(
                "record has {} values, schema has {} variables",
                rec.values.len(),
                self.d_vars()
            )));
        }
        for (v, val) in self.variables.iter().zip(&rec.values) {
            match (v.cardinality(), val) {
                (None, TabValue::Num(x)) if x.is_finite() => {}
                (None, _) => return Err(Error::Data(format!("variable {:?} needs a finite number", v.name))),
                (Some(k), TabValue::Cat(i)) if *i < k => {}
                (Some(k), TabValue::Cat(i)) => {
                    return Err(Error::Data(format!("variable {:?}: category index {i} >= cardinality {k}", v.name)))
                }
                (Some(_), TabValue::Num(_)) => return Err(Error::Data(format!("variable {:?} needs a category", v.name))),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TabValue {
    Num(f64),
    Cat(usize),
}

/// One subject's clinical values in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularRecord {
    pub values: Vec<TabValue>,
}

impl TabularRecord {
    pub fn num(&self, j: usize) -> Option<f64> {
        match self.values[j] {
            TabValue::Num(x) => Some(x),
            TabValue::Cat(_) => None,
        }
    }

    pub fn cat(&self, j: usize) -> Option<usize> {
        match self.values[j] {
            TabValue::Cat(i) => Some(i),
            TabValue::Num(_) => None,
        }
    }
}
