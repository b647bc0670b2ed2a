//! Binary morphology on boolean planes with a 3×3 square structuring
//! element. Pixels outside the grid count as background for both
//! operators.

pub fn dilate(plane: &[bool], height: usize, width: usize) -> Vec<bool> {
    neighbourhood(plane, height, width, |any, _all| any)
}

pub fn erode(plane: &[bool], height: usize, width: usize) -> Vec<bool> {
    neighbourhood(plane, height, width, |_any, all| all)
}

pub fn dilate_n(plane: &[bool], height: usize, width: usize, n: usize) -> Vec<bool> {
    (0..n).fold(plane.to_vec(), |acc, _| dilate(&acc, height, width))
}

pub fn erode_n(plane: &[bool], height: usize, width: usize, n: usize) -> Vec<bool> {
    (0..n).fold(plane.to_vec(), |acc, _| erode(&acc, height, width))
}

fn neighbourhood(
    plane: &[bool],
    height: usize,
    width: usize,
    combine: impl Fn(bool, bool) -> bool,
) -> Vec<bool> {
    assert_eq!(plane.len(), height * width, "plane does not match {height}x{width}");
    let mut out = vec![false; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let (mut any, mut all) = (false, true);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    let v = ny >= 0
                        && nx >= 0
                        && (ny as usize) < height
                        && (nx as usize) < width
                        && plane[ny as usize * width + nx as usize];
                    any |= v;
                    all &= v;
                }
            }
            out[y * width + x] = combine(any, all);
        }
    }
    out
}
