//! Terminal conditions and coefficient fields given as `evalexpr` expressions.
//!
//! Variables: `b` (= `b1`), `b1`, `b2` (walk value), `t`, `T`, `N`, `level`, `pi`.
//! Functions: `sin cos tan exp ln sqrt abs tanh sinh cosh sign` in addition
//! to the evalexpr builtins. A tuple expression gives a vector value.

use evalexpr::{
    build_operator_tree, ContextWithMutableFunctions, ContextWithMutableVariables, DefaultNumericTypes, EvalexprError,
    Function, HashMapContext, Node, Value,
};

use bsde_core::tree::{AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape, TreeModel};

use crate::error::{CliError, CliResult};

pub struct Expr {
    source: String,
    tree: Node<DefaultNumericTypes>,
}

fn unary(f: fn(f64) -> f64) -> Function<DefaultNumericTypes> {
    Function::new(move |arg: &Value<DefaultNumericTypes>| Ok(Value::Float(f(arg.as_number()?))))
}

fn base_context() -> HashMapContext<DefaultNumericTypes> {
    let mut ctx = HashMapContext::new();
    let table: [(&str, fn(f64) -> f64); 11] = [
        ("sin", f64::sin),
        ("cos", f64::cos),
        ("tan", f64::tan),
        ("exp", f64::exp),
        ("ln", f64::ln),
        ("sqrt", f64::sqrt),
        ("abs", f64::abs),
        ("tanh", f64::tanh),
        ("sinh", f64::sinh),
        ("cosh", f64::cosh),
        ("sign", |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
    ];
    for (name, f) in table {
        ctx.set_function(name.into(), unary(f)).expect("function table");
    }
    ctx.set_value("pi".into(), Value::Float(std::f64::consts::PI))
        .expect("constant");
    ctx
}

impl Expr {
    pub fn parse(source: &str) -> CliResult<Self> {
        let tree = build_operator_tree::<DefaultNumericTypes>(source)
            .map_err(|e| CliError::Config(format!("expression '{source}': {e}")))?;
        // incomplete operators only surface on evaluation; values do not matter here
        let mut ctx = base_context();
        for name in ["b", "b1", "b2", "t", "T", "N", "level"] {
            ctx.set_value(name.into(), Value::Float(0.5)).expect("float variables");
        }
        tree.eval_with_context(&ctx)
            .map_err(|e| CliError::Config(format!("expression '{source}': {e}")))?;
        Ok(Self {
            source: source.to_string(),
            tree,
        })
    }

    fn eval_with(&self, vars: &[(&str, f64)], width: usize) -> CliResult<Vec<f64>> {
        let mut ctx = base_context();
        for (name, v) in vars {
            ctx.set_value((*name).into(), Value::Float(*v))
                .expect("float variables");
        }
        let err =
            |e: EvalexprError<DefaultNumericTypes>| CliError::Config(format!("expression '{}': {e}", self.source));
        let value = self.tree.eval_with_context(&ctx).map_err(err)?;
        let out: Vec<f64> = match value {
            Value::Tuple(items) => items
                .iter()
                .map(|v| v.as_number().map_err(err))
                .collect::<CliResult<_>>()?,
            other => vec![other.as_number().map_err(err)?],
        };
        if out.len() != width {
            return Err(CliError::Config(format!(
                "expression '{}' has {} components, expected {width}",
                self.source,
                out.len()
            )));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Config(format!(
                "expression '{}' is not finite at {vars:?}",
                self.source
            )));
        }
        Ok(out)
    }

    fn walk_vars(tree: &TreeModel, b: &[f64], t: f64, level: usize) -> Vec<(&'static str, f64)> {
        let mut vars = vec![
            ("b", b[0]),
            ("b1", b[0]),
            ("t", t),
            ("T", tree.horizon()),
            ("N", tree.depth() as f64),
            ("level", level as f64),
        ];
        if b.len() > 1 {
            vars.push(("b2", b[1]));
        }
        vars
    }

    /// Leaf values `ξ = expr(B_T)` of width `n`.
    pub fn leaf_values(&self, tree: &TreeModel, n: usize) -> CliResult<LeafValues> {
        let shape = if n == 1 { Shape::Scalar } else { Shape::Vector(n) };
        let walk = tree.brownian();
        let mut values = Vec::with_capacity(tree.num_leaves() * n);
        for leaf in 0..tree.num_leaves() {
            let b = walk.node(NodeRef::new(tree.depth(), leaf));
            values.extend(self.eval_with(&Self::walk_vars(tree, b, tree.horizon(), tree.depth()), n)?);
        }
        crate::error::setup(LeafValues::new(tree, shape, values))
    }

    /// A scalar process on the step levels, evaluated at `(t, B_t)` of each node.
    pub fn process(&self, tree: &TreeModel, shape: Shape, entry: EntryKind) -> CliResult<AdaptedProcess> {
        let walk = tree.brownian();
        let width = shape.len() * if entry == EntryKind::VecD { tree.dim() } else { 1 };
        let mut failure = None;
        let p = AdaptedProcess::from_fn(tree, shape, entry, false, |u, out| {
            if failure.is_some() {
                return;
            }
            match self.eval_with(&Self::walk_vars(tree, walk.node(u), tree.time(u.level), u.level), width) {
                Ok(v) => out.copy_from_slice(&v),
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_and_tuple_terminals() {
        let tree = TreeModel::new(3, 1.0, 1).unwrap();
        let xi = Expr::parse("b").unwrap().leaf_values(&tree, 1).unwrap();
        assert_eq!(xi.values().iter().sum::<f64>(), 0.0);
        let v = Expr::parse("(sin(b), cosh(b) + pi)")
            .unwrap()
            .leaf_values(&tree, 2)
            .unwrap();
        assert_eq!(v.width(), 2);
        assert!(Expr::parse("(b, b)").unwrap().leaf_values(&tree, 1).is_err());
        assert!(Expr::parse("b +").is_err());
        assert!(Expr::parse("ln(b - 10)").unwrap().leaf_values(&tree, 1).is_err());
    }

    #[test]
    fn integer_literals_are_numbers() {
        let tree = TreeModel::new(2, 1.0, 2).unwrap();
        let p = Expr::parse("1")
            .unwrap()
            .process(&tree, Shape::Scalar, EntryKind::Real)
            .unwrap();
        assert_eq!(p.node(NodeRef::ROOT), &[1.0]);
        let q = Expr::parse("(b1, b2 * t)")
            .unwrap()
            .process(&tree, Shape::Scalar, EntryKind::VecD)
            .unwrap();
        assert_eq!(q.node(NodeRef::ROOT), &[0.0, 0.0]);
    }
}
