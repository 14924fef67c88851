//! Module 2.

pub fn value_0(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 1;
    }
    acc
}

pub fn buffer_1(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 2;
    }
    acc
}

pub fn record_2(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 3;
    }
    acc
}

pub fn record_3(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 4;
    }
    acc
}

pub fn path_4(x: i64) -> i64 {
    let mut acc = 0;
    for j in 0..x {
        acc += j * 5;
    }
    acc
}

