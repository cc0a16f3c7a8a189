use crate::error::{invalid, Result};
use crate::tensorlab::TokenSequence;

/// Appends token streams along the sequence axis, in list order.
pub fn fuse_sequence_append(sequences: &[TokenSequence]) -> Result<TokenSequence> {
    let first = sequences
        .first()
        .ok_or_else(|| invalid("sequence append needs at least one stream"))?;
    let dim = first.dim;
    if let Some((i, s)) = sequences.iter().enumerate().find(|(_, s)| s.dim != dim) {
        return Err(invalid(format!(
            "sequence append: stream {i} has dim {} but stream 0 has dim {dim}",
            s.dim
        )));
    }
    let length = sequences.iter().map(|s| s.length).sum();
    let mut data = Vec::with_capacity(length * dim);
    for s in sequences {
        data.extend_from_slice(&s.data);
    }
    Ok(TokenSequence { length, dim, data })
}

/// Splits an appended gradient back into per-stream pieces.
pub fn sequence_append_backward(lengths: &[usize], grad: &TokenSequence) -> Vec<TokenSequence> {
    let mut offset = 0;
    lengths
        .iter()
        .map(|&len| {
            let data = grad.data[offset * grad.dim..(offset + len) * grad.dim].to_vec();
            offset += len;
            TokenSequence {
                length: len,
                dim: grad.dim,
                data,
            }
        })
        .collect()
}

/// Stacks token streams along the channel axis; channel blocks follow list order.
pub fn fuse_channel_concat(sequences: &[TokenSequence]) -> Result<TokenSequence> {
    let first = sequences
        .first()
        .ok_or_else(|| invalid("channel concat needs at least one stream"))?;
    let length = first.length;
    if let Some((i, s)) = sequences.iter().enumerate().find(|(_, s)| s.length != length) {
        return Err(invalid(format!(
            "channel concat: expert {i} has {} tokens but expert 0 has {length}",
            s.length
        )));
    }
    let dim: usize = sequences.iter().map(|s| s.dim).sum();
    let mut data = Vec::with_capacity(length * dim);
    for t in 0..length {
        for s in sequences {
            data.extend_from_slice(s.token(t));
        }
    }
    Ok(TokenSequence { length, dim, data })
}

pub fn channel_concat_backward(dims: &[usize], grad: &TokenSequence) -> Vec<TokenSequence> {
    let mut out: Vec<TokenSequence> = dims
        .iter()
        .map(|&d| TokenSequence::zeros(grad.length, d))
        .collect();
    for t in 0..grad.length {
        let row = grad.token(t);
        let mut off = 0;
        for (o, &d) in out.iter_mut().zip(dims) {
            o.data[t * d..(t + 1) * d].copy_from_slice(&row[off..off + d]);
            off += d;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(length: usize, dim: usize, start: f64) -> TokenSequence {
        TokenSequence::new(length, dim, (0..length * dim).map(|i| start + i as f64).collect()).unwrap()
    }

    #[test]
    fn single_stream_unchanged() {
        let s = seq(4, 3, 0.0);
        assert_eq!(fuse_sequence_append(&[s.clone()]).unwrap(), s);
        assert_eq!(fuse_channel_concat(&[s.clone()]).unwrap(), s);
    }

    #[test]
    fn append_shapes() {
        let out = fuse_sequence_append(&[seq(16, 32, 0.0), seq(64, 32, 1.0)]).unwrap();
        assert_eq!((out.length, out.dim), (80, 32));
        // full scale: two experts at 1024 tokens
        let out = fuse_sequence_append(&[TokenSequence::zeros(1024, 2), TokenSequence::zeros(1024, 2)]).unwrap();
        assert_eq!(out.length, 2048);
    }

    #[test]
    fn concat_shapes() {
        let out = fuse_channel_concat(&[seq(64, 8, 0.0), seq(64, 24, 0.0)]).unwrap();
        assert_eq!((out.length, out.dim), (64, 32));
        let three = vec![TokenSequence::zeros(1024, 1); 3];
        assert_eq!(fuse_channel_concat(&three).unwrap().length, 1024);
    }

    #[test]
    fn mismatches_are_rejected() {
        let e = fuse_sequence_append(&[seq(2, 3, 0.0), seq(2, 4, 0.0)]).unwrap_err();
        assert!(e.to_string().contains("stream 1"));
        let e = fuse_channel_concat(&[seq(2, 3, 0.0), seq(3, 3, 0.0)]).unwrap_err();
        assert!(e.to_string().contains("expert 1"));
    }

    #[test]
    fn concat_permutation_permutes_blocks() {
        let a = seq(5, 2, 0.0);
        let b = seq(5, 3, 100.0);
        let c = seq(5, 1, 200.0);
        let abc = fuse_channel_concat(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cab = fuse_channel_concat(&[c, a, b]).unwrap();
        for t in 0..5 {
            let x = abc.token(t);
            let y = cab.token(t);
            assert_eq!(&y[0..1], &x[5..6]);
            assert_eq!(&y[1..3], &x[0..2]);
            assert_eq!(&y[3..6], &x[2..5]);
        }
    }

    #[test]
    fn backward_splits_exactly() {
        let a = seq(3, 2, 0.0);
        let b = seq(3, 4, 50.0);
        let cat = fuse_channel_concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(channel_concat_backward(&[2, 4], &cat), vec![a.clone(), b]);
        let app = fuse_sequence_append(&[a.clone(), seq(5, 2, 9.0)]).unwrap();
        assert_eq!(sequence_append_backward(&[3, 5], &app)[0], a);
    }
}
