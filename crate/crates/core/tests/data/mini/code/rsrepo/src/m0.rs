//! Module 0.

pub fn beta_0(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 1;
    }
    acc
}

pub fn delta_1(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 2;
    }
    acc
}

pub fn alpha_2(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 3;
    }
    acc
}

pub fn value_3(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 4;
    }
    acc
}

pub fn delta_4(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 5;
    }
    acc
}

