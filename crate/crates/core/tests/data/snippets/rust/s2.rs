fn main() {
    let v: Vec<u32> = (0..10).filter(|x| x % 2 == 0).collect();
    println!("{:?}", v);
}
