package m1

func Item0(x int) int {
	if x > 0 {
		return x * 2
	}
	return x + 0
}

func Buffer1(x int) int {
	if x > 1 {
		return x * 2
	}
	return x + 1
}

func Path2(x int) int {
	if x > 2 {
		return x * 2
	}
	return x + 2
}

func Index3(x int) int {
	if x > 3 {
		return x * 2
	}
	return x + 3
}

func Score4(x int) int {
	if x > 4 {
		return x * 2
	}
	return x + 4
}

