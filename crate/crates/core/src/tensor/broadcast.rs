use super::{Result, TensorError};

/// Index mapping from a broadcast output back into one operand.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    /// Operand has the output shape.
    Same,
    /// Operand is a trailing block repeated along the leading axes.
    Cycle(usize),
    /// Operand holds one value.
    Scalar,
    /// Arbitrary broadcast; explicit per-output source offsets.
    General(Vec<usize>),
}

impl Bcast {
    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Scalar => 0,
            Bcast::General(ix) => ix[i],
        }
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Builds the mapping that reads `operand` while iterating over `out`.
pub(crate) fn mapping(operand: &[usize], out: &[usize]) -> Bcast {
    let n_op: usize = operand.iter().product();
    let n_out: usize = out.iter().product();
    if n_op == n_out {
        return Bcast::Same;
    }
    if n_op == 1 {
        return Bcast::Scalar;
    }
    // Trailing block: operand (ignoring leading ones) equals a suffix of out.
    let trimmed: Vec<usize> = operand.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Bcast::Cycle(n_op);
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for k in 0..operand.len() {
        let axis = operand.len() - 1 - k;
        let out_axis = rank - 1 - k;
        if operand[axis] != 1 {
            strides[out_axis] = acc;
        }
        acc *= operand[axis];
    }
    let mut ix = Vec::with_capacity(n_out);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n_out {
        ix.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Bcast::General(ix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn general_mapping_matches_manual_index() {
        // [2,1,3] broadcast into [2,4,3]
        let m = mapping(&[2, 1, 3], &[2, 4, 3]);
        for a in 0..2 {
            for b in 0..4 {
                for c in 0..3 {
                    let i = (a * 4 + b) * 3 + c;
                    assert_eq!(m.at(i), a * 3 + c);
                }
            }
        }
    }

    #[test]
    fn incompatible_shapes_are_named() {
        let err = broadcast_shape("add", &[2, 3], &[4]).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![4]
            }
        );
    }
}
