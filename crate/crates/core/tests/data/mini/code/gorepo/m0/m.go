package m0

func Path0(x int) int {
	if x > 0 {
		return x * 2
	}
	return x + 0
}

func Cache1(x int) int {
	if x > 1 {
		return x * 2
	}
	return x + 1
}

func Gamma2(x int) int {
	if x > 2 {
		return x * 2
	}
	return x + 2
}

func Value3(x int) int {
	if x > 3 {
		return x * 2
	}
	return x + 3
}

func Delta4(x int) int {
	if x > 4 {
		return x * 2
	}
	return x + 4
}

