fn main() {
    println!("osad");
}
