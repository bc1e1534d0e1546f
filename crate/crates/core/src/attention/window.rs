use crate::error::{Result, TklError};

/// One attention window over a document.
///
/// Tokens `[start, end)` attend to each other; only the contextual vectors
/// for `[keep_start, keep_end)` are kept when stitching the document back
/// together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub keep_start: usize,
    pub keep_end: usize,
}

impl Window {
    /// A single window that covers and keeps `[0, len)`.
    pub fn whole(len: usize) -> Self {
        Window {
            start: 0,
            end: len,
            keep_start: 0,
            keep_end: len,
        }
    }

    pub fn size(&self) -> usize {
        self.end - self.start
    }

    /// True when every kept position is padding.
    pub fn keeps_only_padding(&self, mask: &[bool]) -> bool {
        !mask[self.keep_start..self.keep_end].iter().any(|&m| m)
    }
}

/// Overlapping window decomposition of one (possibly padded) document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub length: usize,
    pub core: usize,
    pub overlap: usize,
    pub windows: Vec<Window>,
}

/// Splits `[0, doc_length)` into `ceil(L / w)` windows. Window `k` keeps
/// `[k·w, min((k+1)·w, L))` and additionally sees `o` tokens of context on
/// each side, clipped to the document.
pub fn plan_windows(doc_length: usize, core: usize, overlap: usize) -> Result<WindowPlan> {
    if core == 0 {
        return Err(TklError::Argument("window size must be positive".into()));
    }
    if overlap >= core {
        return Err(TklError::Argument(format!(
            "overlap {overlap} must be smaller than window size {core}"
        )));
    }
    if doc_length == 0 {
        return Err(TklError::Argument("document length must be at least 1".into()));
    }
    let count = doc_length.div_ceil(core);
    let windows = (0..count)
        .map(|k| Window {
            start: (k * core).saturating_sub(overlap),
            end: ((k + 1) * core + overlap).min(doc_length),
            keep_start: k * core,
            keep_end: ((k + 1) * core).min(doc_length),
        })
        .collect();
    Ok(WindowPlan {
        length: doc_length,
        core,
        overlap,
        windows,
    })
}

impl WindowPlan {
    /// Windows whose kept range contains at least one real token, plus the
    /// number of windows dropped.
    pub fn packable(&self, mask: &[bool]) -> (Vec<Window>, usize) {
        let kept: Vec<Window> = self
            .windows
            .iter()
            .copied()
            .filter(|w| !w.keeps_only_padding(mask))
            .collect();
        let skipped = self.windows.len() - kept.len();
        (kept, skipped)
    }

    /// `Σ size²` over all windows: query·key score entries of one attention map.
    pub fn score_entries(&self) -> u64 {
        self.windows.iter().map(|w| (w.size() as u64).pow(2)).sum()
    }
}
