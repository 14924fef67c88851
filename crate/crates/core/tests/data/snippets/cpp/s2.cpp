class Box {
public:
    explicit Box(int w) : w_(w) {}
    int width() const { return w_; }
private:
    int w_;
};
