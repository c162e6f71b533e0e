//! Delay pattern over residual codebooks.
//!
//! Codebook `k` (1-based) is shifted `k - 1` rows later, so a grid of `T`
//! frames becomes `T + K - 1` rows in which row `r` holds `A[r - k + 1, k]`
//! for every codebook. Cells outside the shifted data region hold `A_fill`.
//! Internally everything is 0-based: row `r` column `k` holds frame `r - k`.

use crate::error::{Error, Result};
use crate::vocab::{validate_grid, AcousticGrid, GridReport, TokenVocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayedGrid {
    rows: usize,
    codebooks: usize,
    source_frames: usize,
    fill: u32,
    data: Vec<u32>,
}

/// Frame index stored at delayed cell (row, k), or `None` for a fill cell.
pub fn delayed_frame(row: usize, k: usize, frames: usize) -> Option<usize> {
    row.checked_sub(k).filter(|&t| t < frames)
}

impl DelayedGrid {
    /// Wraps raw delayed rows, checking the fill structure cell by cell.
    pub fn from_rows(rows: Vec<Vec<u32>>, vocab: &TokenVocabulary) -> Result<Self> {
        let codebooks = vocab.num_codebooks;
        let fill = vocab.a_fill();
        if rows.len() + 1 < codebooks {
            return Err(Error::MalformedDelay {
                row: rows.len(),
                codebook: 0,
                reason: format!("need at least {} rows", codebooks - 1),
            });
        }
        let frames = rows.len() + 1 - codebooks;
        let mut data = Vec::with_capacity(rows.len() * codebooks);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != codebooks {
                return Err(Error::MalformedDelay {
                    row: r,
                    codebook: row.len(),
                    reason: format!("row has {} cells, expected {codebooks}", row.len()),
                });
            }
            for (k, &id) in row.iter().enumerate() {
                let ok = match delayed_frame(r, k, frames) {
                    Some(_) => id < vocab.at_size,
                    None => id == fill,
                };
                if !ok {
                    return Err(Error::MalformedDelay {
                        row: r,
                        codebook: k,
                        reason: format!("unexpected id {id}"),
                    });
                }
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            codebooks,
            source_frames: frames,
            fill,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn source_frames(&self) -> usize {
        self.source_frames
    }

    pub fn get(&self, row: usize, k: usize) -> u32 {
        self.data[row * self.codebooks + k]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.data[row * self.codebooks..(row + 1) * self.codebooks]
    }

    pub fn is_fill(&self, row: usize, k: usize) -> bool {
        delayed_frame(row, k, self.source_frames).is_none()
    }

    pub fn fill_count(&self) -> usize {
        self.data.iter().filter(|&&id| id == self.fill).count()
    }
}

pub fn apply_delay(grid: &AcousticGrid, vocab: &TokenVocabulary) -> Result<DelayedGrid> {
    match validate_grid(grid, vocab) {
        GridReport::Pass => {}
        GridReport::Fail { t, k, id } => {
            return Err(Error::AcousticIdOutOfRange {
                t,
                k,
                id,
                limit: vocab.at_size,
            })
        }
        GridReport::WrongWidth { found, expected } => {
            return Err(Error::Shape(format!(
                "grid has {found} codebooks, vocabulary has {expected}"
            )))
        }
    }
    let codebooks = vocab.num_codebooks;
    let frames = grid.frames();
    let rows = frames + codebooks - 1;
    let fill = vocab.a_fill();
    let mut data = Vec::with_capacity(rows * codebooks);
    for r in 0..rows {
        for k in 0..codebooks {
            data.push(match delayed_frame(r, k, frames) {
                Some(t) => grid.get(t, k),
                None => fill,
            });
        }
    }
    Ok(DelayedGrid {
        rows,
        codebooks,
        source_frames: frames,
        fill,
        data,
    })
}

pub fn remove_delay(delayed: &DelayedGrid) -> Result<AcousticGrid> {
    let codebooks = delayed.codebooks;
    let frames = delayed.source_frames;
    let mut data = Vec::with_capacity(frames * codebooks);
    for t in 0..frames {
        for k in 0..codebooks {
            let id = delayed.get(t + k, k);
            if id == delayed.fill {
                return Err(Error::MalformedDelay {
                    row: t + k,
                    codebook: k,
                    reason: "fill inside the data region".into(),
                });
            }
            data.push(id);
        }
    }
    for r in 0..delayed.rows {
        for k in 0..codebooks {
            if delayed.is_fill(r, k) && delayed.get(r, k) != delayed.fill {
                return Err(Error::MalformedDelay {
                    row: r,
                    codebook: k,
                    reason: "data token in a fill position".into(),
                });
            }
        }
    }
    AcousticGrid::new(frames, codebooks, data)
}

/// The K ids every head must predict at decoder step `step` (1-based).
pub fn head_targets(delayed: &DelayedGrid, step: usize) -> Result<Vec<u32>> {
    if step == 0 || step > delayed.rows {
        return Err(Error::StepOutOfRange {
            step,
            rows: delayed.rows,
        });
    }
    Ok(delayed.row(step - 1).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const F: u32 = 64;

    fn vocab(k: usize) -> TokenVocabulary {
        TokenVocabulary::new(500, 64, k).unwrap()
    }

    // a=1.., b=11.., c=21..
    fn two_by_three() -> AcousticGrid {
        AcousticGrid::from_rows(&[vec![1, 11, 21], vec![2, 12, 22]], 3).unwrap()
    }

    #[test]
    fn shifts_each_codebook_one_more_step() {
        let d = apply_delay(&two_by_three(), &vocab(3)).unwrap();
        assert_eq!(d.rows(), 4);
        assert_eq!(d.row(0), &[1, F, F]);
        assert_eq!(d.row(1), &[2, 11, F]);
        assert_eq!(d.row(2), &[F, 12, 21]);
        assert_eq!(d.row(3), &[F, F, 22]);
        assert_eq!(d.fill_count(), 6);
        assert_eq!(remove_delay(&d).unwrap(), two_by_three());
    }

    #[test]
    fn single_codebook_is_identity() {
        let g = AcousticGrid::from_rows(&[vec![3], vec![4], vec![5]], 1).unwrap();
        let d = apply_delay(&g, &vocab(1)).unwrap();
        assert_eq!(d.rows(), 3);
        assert_eq!(d.fill_count(), 0);
        assert_eq!((0..3).map(|r| d.get(r, 0)).collect::<Vec<_>>(), vec![3, 4, 5]);
    }

    #[test]
    fn empty_grid_is_all_fill() {
        let d = apply_delay(&AcousticGrid::empty(3), &vocab(3)).unwrap();
        assert_eq!(d.rows(), 2);
        assert_eq!(d.fill_count(), 6);
        let back = remove_delay(&d).unwrap();
        assert_eq!(back.frames(), 0);
    }

    #[test]
    fn head_targets_reads_rows() {
        let d = apply_delay(&two_by_three(), &vocab(3)).unwrap();
        assert_eq!(head_targets(&d, 2).unwrap(), vec![2, 11, F]);
        assert_eq!(head_targets(&d, 1).unwrap(), vec![1, F, F]);
        assert!(head_targets(&d, 0).is_err());
        assert!(head_targets(&d, 5).is_err());
    }

    #[test]
    fn twelfth_head_starts_at_step_twelve() {
        let v = vocab(12);
        let rows: Vec<Vec<u32>> = (0..15u32)
            .map(|t| (0..12u32).map(|k| (t + k) % 64).collect())
            .collect();
        let g = AcousticGrid::from_rows(&rows, 12).unwrap();
        let d = apply_delay(&g, &v).unwrap();
        let step12 = head_targets(&d, 12).unwrap();
        assert_eq!(step12[11], g.get(0, 11));
        assert_eq!(head_targets(&d, 11).unwrap()[11], F);
    }

    #[test]
    fn malformed_fill_is_named() {
        let v = vocab(3);
        let err = DelayedGrid::from_rows(
            vec![vec![1, 5, F], vec![2, 11, F], vec![F, 12, 21], vec![F, F, 22]],
            &v,
        )
        .unwrap_err();
        match err {
            Error::MalformedDelay { row, codebook, .. } => assert_eq!((row, codebook), (0, 1)),
            other => panic!("unexpected {other:?}"),
        }
        let ok = DelayedGrid::from_rows(
            vec![vec![1, F, F], vec![2, 11, F], vec![F, 12, 21], vec![F, F, 22]],
            &v,
        )
        .unwrap();
        assert_eq!(remove_delay(&ok).unwrap(), two_by_three());
        let all_fill = DelayedGrid::from_rows(vec![vec![F; 3]; 2], &v).unwrap();
        assert_eq!(remove_delay(&all_fill).unwrap().frames(), 0);
    }

    #[test]
    fn rejects_out_of_range_input() {
        let g = AcousticGrid::from_rows(&[vec![1, 64, 2]], 3).unwrap();
        assert!(apply_delay(&g, &vocab(3)).is_err());
    }

    fn grid_strategy() -> impl Strategy<Value = AcousticGrid> {
        (1usize..=12, 0usize..=60).prop_flat_map(|(k, t)| {
            proptest::collection::vec(0u32..64, t * k)
                .prop_map(move |data| AcousticGrid::new(t, k, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_and_fill_structure(grid in grid_strategy()) {
            let k = grid.codebooks();
            let t = grid.frames();
            let d = apply_delay(&grid, &vocab(k)).unwrap();
            prop_assert_eq!(d.rows(), t + k - 1);
            prop_assert_eq!(&remove_delay(&d).unwrap(), &grid);
            for col in 0..k {
                let column: Vec<u32> = (0..d.rows()).map(|r| d.get(r, col)).collect();
                if t == 0 {
                    prop_assert!(column.iter().all(|&id| id == F));
                    continue;
                }
                let leading = column.iter().take_while(|&&id| id == F).count();
                let trailing = column.iter().rev().take_while(|&&id| id == F).count();
                prop_assert_eq!(leading, col);
                prop_assert_eq!(trailing, k - 1 - col);
                let mut data: Vec<u32> = column[leading..column.len() - trailing].to_vec();
                let mut source = grid.column(col);
                data.sort_unstable();
                source.sort_unstable();
                prop_assert_eq!(data, source);
            }
        }
    }
}
